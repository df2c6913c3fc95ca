"""Ordered process-pool map with single-threaded BLAS in every worker.

Results come back in input order, and every task derives its randomness from
its own key, so the output does not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

from threadpoolctl import threadpool_limits

__all__ = ["pmap", "chunked"]


def _init_worker():
    os.environ["OMP_NUM_THREADS"] = "1"
    threadpool_limits(1)


def pmap(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally spread over ``threads`` processes."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        with threadpool_limits(1):
            return [fn(x) for x in items]
    workers = min(threads, len(items))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as ex:
        return list(ex.map(fn, items))


def chunked(seq: Sequence, parts: int) -> list:
    """Split ``seq`` into at most ``parts`` contiguous, nearly equal chunks."""
    seq = list(seq)
    parts = max(1, min(parts, len(seq)))
    size, extra = divmod(len(seq), parts)
    out, start = [], 0
    for i in range(parts):
        stop = start + size + (i < extra)
        out.append(seq[start:stop])
        start = stop
    return out
