"""Counter-based random streams keyed by (seed, purpose, indices).

Every random draw in the package comes from ``stream(seed, tag, *keys)``, a
Philox generator whose key is derived from the full tuple. Draw ``b`` of a
resampling loop therefore does not depend on how many draws ran before it or
on which worker ran it.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "child_seed"]


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), _tag_code(tag), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, tag: str, *keys: int) -> int:
    """Derive a 63-bit integer seed for a sub-computation."""
    ss = np.random.SeedSequence([int(seed), _tag_code(tag), *(int(k) for k in keys)])
    lo, hi = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) & (2**63 - 1)
