"""Null reference distributions for the scaled coefficient statistics.

The permutation reference for outcome ``m`` shuffles that outcome alone
across subjects, refits its marginal model, and reruns the joint fit with the
other outcomes untouched. Predictors that act on the other outcomes thus
still shape the shrinkage seen by ``(j, m)``, while the association between
``x`` and outcome ``m`` is broken.

The resampling reference centres perturbation draws at the estimate:
``sqrt(n) |beta_hat* - beta_hat| / sigma_tilde``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .hierlasso import PenaltySpec, fit_hierarchical
from .marginal import ConvergenceError, SeparationError, fit_cumulative_logit
from .parallel import chunked, pmap
from .quadratic import QuadraticSystem, assemble
from .rng import stream

__all__ = [
    "ReferenceDistribution",
    "permutation_reference",
    "permutation_pair",
    "build_reference",
    "build_reference_pair",
    "resampling_reference",
    "resampling_reference_pair",
    "write_reference",
    "read_reference",
]

MAX_FAIL_FRACTION = 0.10
MAX_ATTEMPTS = 4
_FIT_ERRORS = (ConvergenceError, SeparationError, ValueError, FloatingPointError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class ReferenceDistribution:
    """Draws of the null statistic, ``values[j, m, b]``."""

    kind: str
    values: np.ndarray
    seed: int
    failures: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3:
            raise ValueError("reference values must have shape (p, M, B)")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("reference values must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def B(self) -> int:
        return self.values.shape[2]


def _permuted_block(dataset: Dataset, fits, m: int, seed: int, b: int):
    """Refit outcome ``m`` on a permuted copy; retries use fresh permutations."""
    col = dataset.outcomes[m]
    for attempt in range(MAX_ATTEMPTS):
        keys = (m, b) if attempt == 0 else (m, b, attempt)
        perm = stream(seed, "perm", *keys).permutation(dataset.n)
        try:
            return fit_cumulative_logit(dataset.X, col.values[perm], col.levels, m=m), attempt
        except _FIT_ERRORS:
            continue
    raise RuntimeError(f"permuted refit failed {MAX_ATTEMPTS} times for outcome {m}, draw {b}")


def _pair_chunk(args):
    dataset, fits, system, lam, m, seed, idx = args
    p = system.p
    hat = np.empty((p, len(idx)))
    tilde = np.empty((p, len(idx)))
    failed = 0
    for i, b in enumerate(idx):
        fit, attempt = _permuted_block(dataset, fits, m, seed, b)
        failed += attempt > 0
        star = system.with_block(m, fit)
        sf = fit_hierarchical(star, PenaltySpec.adaptive(star.beta_tilde, lam))
        hat[:, i] = sf.beta_hat[:, m]
        tilde[:, i] = fit.beta_tilde
    return hat, tilde, failed


def permutation_pair(dataset: Dataset, fits, lam: float, m: int, B: int, seed: int,
                     threads: int = 1, system: QuadraticSystem | None = None):
    """Permuted draws of column ``m`` for both the joint and the marginal estimate.

    Returns ``(t_hat, t_tilde, failures)`` where the first two are (p, B)
    arrays of ``sqrt(n) |beta_b[:, m]| / sigma_tilde[:, m]`` using the
    original-data ``sigma_tilde``.
    """
    fits = list(fits)
    if B < 1:
        raise ValueError("need at least one permutation draw")
    system = assemble(fits) if system is None else system
    tasks = [(dataset, fits, system, float(lam), m, seed, idx)
             for idx in chunked(range(B), max(1, threads))]
    parts = pmap(_pair_chunk, tasks, threads)
    hat = np.concatenate([h for h, _, _ in parts], axis=1)
    tilde = np.concatenate([t for _, t, _ in parts], axis=1)
    failed = sum(f for _, _, f in parts)
    if failed > MAX_FAIL_FRACTION * B:
        raise RuntimeError(f"{failed} of {B} permuted refits failed for outcome {m}")
    scale = np.sqrt(dataset.n) / fits[m].sigma_tilde[:, None]
    return np.abs(hat) * scale, np.abs(tilde) * scale, failed


def permutation_reference(dataset: Dataset, fits, lam: float, m: int, B: int, seed: int,
                          threads: int = 1) -> np.ndarray:
    """Permutation draws of ``t[:, m]`` for the joint estimate, shape (p, B)."""
    return permutation_pair(dataset, fits, lam, m, B, seed, threads)[0]


def build_reference_pair(dataset: Dataset, fits, lam: float, B: int, seed: int, threads: int = 1):
    """Permutation references for the joint (``beta_hat``) and marginal (``beta_tilde``) statistics."""
    fits = list(fits)
    system = assemble(fits)
    hats, tildes, failed = [], [], 0
    for m in range(dataset.M):
        h, t, f = permutation_pair(dataset, fits, lam, m, B, seed, threads, system)
        hats.append(h)
        tildes.append(t)
        failed += f
    return (ReferenceDistribution("permutation", np.stack(hats, axis=1), seed, failed),
            ReferenceDistribution("permutation", np.stack(tildes, axis=1), seed, failed))


def build_reference(dataset: Dataset, fits, lam: float, B: int, seed: int, threads: int = 1) -> ReferenceDistribution:
    """Stack ``permutation_reference`` over all outcomes into a (p, M, B) reference."""
    return build_reference_pair(dataset, fits, lam, B, seed, threads)[0]


def resampling_reference(draws, beta_hat, sigma_tilde) -> ReferenceDistribution:
    """``sqrt(n) |beta_hat*_b - beta_hat| / sigma_tilde`` over the successful draws."""
    star = draws.beta_hat_star[draws.ok]
    if star.shape[0] == 0:
        raise ValueError("no perturbation draws available")
    vals = np.sqrt(draws.n) * np.abs(star - np.asarray(beta_hat)) / np.asarray(sigma_tilde)
    return ReferenceDistribution("resampling", np.moveaxis(vals, 0, -1), draws.seed, len(draws.failures))


def resampling_reference_pair(draws, beta_hat, beta_tilde, sigma_tilde):
    """Resampling references for the joint and the marginal statistics."""
    hat = resampling_reference(draws, beta_hat, sigma_tilde)
    star = draws.beta_tilde_star[draws.ok]
    vals = np.sqrt(draws.n) * np.abs(star - np.asarray(beta_tilde)) / np.asarray(sigma_tilde)
    tilde = ReferenceDistribution("resampling", np.moveaxis(vals, 0, -1), draws.seed, len(draws.failures))
    return hat, tilde


def write_reference(ref: ReferenceDistribution, path) -> None:
    """JSON lines: a header, then one line per (m, b) holding the p statistics."""
    p, M, B = ref.values.shape
    with open(path, "w") as fh:
        fh.write(json.dumps({"kind": ref.kind, "seed": ref.seed, "p": p, "M": M, "B": B,
                             "failures": ref.failures}) + "\n")
        for m in range(M):
            for b in range(B):
                fh.write(json.dumps({"m": m, "b": b, "t": ref.values[:, m, b].tolist()}) + "\n")


def read_reference(path) -> ReferenceDistribution:
    lines = Path(path).read_text().splitlines()
    head = json.loads(lines[0])
    vals = np.empty((head["p"], head["M"], head["B"]))
    for s in lines[1:]:
        row = json.loads(s)
        vals[:, row["m"], row["b"]] = row["t"]
    return ReferenceDistribution(head["kind"], vals, int(head["seed"]), int(head["failures"]))
