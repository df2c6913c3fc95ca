"""Perturbation resampling of the marginal and joint estimates.

Each draw multiplies every subject's likelihood contribution by an iid
positive weight ``G_i`` with mean and variance one. The perturbed marginal
estimate is taken in its one-step form,

    beta_tilde*_m = beta_tilde_m + inv(I_m) sum_i phi_im (G_i - 1),

and the joint fit is then repeated on the perturbed surrogate at the
original lambda, with adaptive weights rebuilt from ``beta_tilde*``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .hierlasso import PenaltySpec, fit_hierarchical
from .parallel import chunked, pmap
from .quadratic import QuadraticSystem
from .rng import stream

__all__ = [
    "PerturbDraws",
    "draw_weights",
    "draw_perturbed_initial",
    "perturb_fit",
    "confidence_intervals",
    "write_draws",
    "read_draws",
]

G_LAWS = ("exponential", "one")
MAX_FAIL_FRACTION = 0.10


@dataclass(frozen=True)
class PerturbDraws:
    """Resampled estimates; ``beta_*_star`` have shape (B, p, M)."""

    B: int
    beta_tilde_star: np.ndarray
    beta_hat_star: np.ndarray
    seed: int
    g_dist: str
    n: int
    lam: float
    failures: tuple = ()
    sigma_hat: np.ndarray = field(init=False)

    def __post_init__(self):
        ok = np.ones(self.B, dtype=bool)
        ok[list(self.failures)] = False
        good = self.beta_hat_star[ok]
        sd = good.std(axis=0, ddof=1) if good.shape[0] > 1 else np.zeros(good.shape[1:])
        object.__setattr__(self, "sigma_hat", sd)

    @property
    def ok(self) -> np.ndarray:
        mask = np.ones(self.B, dtype=bool)
        mask[list(self.failures)] = False
        return mask


def draw_weights(n: int, seed: int, b: int, g_dist: str = "exponential") -> np.ndarray:
    """Perturbation weights for draw ``b``."""
    if g_dist == "exponential":
        return stream(seed, "perturb", b).standard_exponential(n)
    if g_dist == "one":
        return np.ones(n)
    raise ValueError(f"unknown perturbation law {g_dist!r}; expected one of {G_LAWS}")


def draw_perturbed_initial(fits, g) -> np.ndarray:
    """One-step perturbed marginal estimates as a p x M matrix."""
    g = np.asarray(g, dtype=float)
    if np.any(g <= 0):
        raise ValueError("perturbation weights must be positive")
    cols = []
    for fit in fits:
        if g.shape != (fit.n,):
            raise ValueError(f"need {fit.n} weights, got {g.shape}")
        step = np.linalg.solve(fit.profile_info, fit.scores.T @ (g - 1.0))
        cols.append(fit.beta_tilde + step)
    return np.column_stack(cols)


def _one_draw(system: QuadraticSystem, fits, pen: PenaltySpec, seed: int, b: int, g_dist: str):
    g = draw_weights(system.n, seed, b, g_dist)
    bt = draw_perturbed_initial(fits, g)
    forced = ~np.isfinite(pen.weights)
    bt[forced] = 0.0
    star = system.with_beta_tilde(bt)
    fit = fit_hierarchical(star, PenaltySpec.adaptive(bt, pen.lam, pen.nonneg))
    return bt, fit.beta_hat


def _draw_chunk(args):
    system, fits, pen, seed, g_dist, idx = args
    out = []
    for b in idx:
        try:
            out.append((b, *_one_draw(system, fits, pen, seed, b, g_dist)))
        except (ValueError, FloatingPointError, np.linalg.LinAlgError):
            out.append((b, None, None))
    return out


def perturb_fit(system: QuadraticSystem, fits, pen: PenaltySpec, B: int, seed: int,
                g_dist: str = "exponential", threads: int = 1) -> PerturbDraws:
    """Draw ``B`` perturbed joint fits at the fixed lambda ``pen.lam``.

    Entries whose original weight is infinite (``beta_tilde == 0``) stay at
    zero in every draw. Draws that fail are recorded in ``failures`` and
    stored as NaN; more than 10% failures raises ``RuntimeError``.
    """
    if B < 2:
        raise ValueError("need at least two perturbation draws")
    fits = list(fits)
    p, M = system.beta_tilde.shape
    tasks = [(system, fits, pen, seed, g_dist, idx) for idx in chunked(range(B), max(1, threads))]
    bt_star = np.full((B, p, M), np.nan)
    bh_star = np.full((B, p, M), np.nan)
    failures = []
    for chunk in pmap(_draw_chunk, tasks, threads):
        for b, bt, bh in chunk:
            if bt is None:
                failures.append(b)
            else:
                bt_star[b], bh_star[b] = bt, bh
    if len(failures) > MAX_FAIL_FRACTION * B:
        raise RuntimeError(f"{len(failures)} of {B} perturbation draws failed")
    return PerturbDraws(B, bt_star, bh_star, int(seed), g_dist, system.n, float(pen.lam),
                        tuple(sorted(failures)))


def confidence_intervals(draws: PerturbDraws, beta_hat, level: float = 0.95,
                         method: str = "quantile", rule: str = "hazen") -> np.ndarray:
    """Pointwise intervals for the joint estimate, shape (p, M, 2).

    ``normal`` is ``beta_hat +/- z * sigma_hat``; ``quantile`` takes the
    empirical ``(1-level)/2`` and ``(1+level)/2`` quantiles of the draws.
    ``rule`` is passed to ``numpy.quantile``. The default ``hazen`` places
    the i-th order statistic at probability ``(i - 1/2) / B`` and interpolates
    linearly between them, so draws ``1..100`` give ``[5.5, 95.5]`` at
    level 0.9; ``linear`` would give ``[5.95, 95.05]``.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    beta_hat = np.asarray(beta_hat, dtype=float)
    a = 1.0 - level
    if method == "normal":
        z = stats.norm.ppf(1.0 - a / 2.0)
        half = z * draws.sigma_hat
        return np.stack([beta_hat - half, beta_hat + half], axis=-1)
    if method == "quantile":
        good = draws.beta_hat_star[draws.ok]
        if good.shape[0] < 20:
            raise ValueError("quantile intervals need at least 20 draws")
        q = np.quantile(good, [a / 2.0, 1.0 - a / 2.0], axis=0, method=rule)
        return np.moveaxis(q, 0, -1)
    raise ValueError(f"unknown interval method {method!r}")


def write_draws(draws: PerturbDraws, path) -> None:
    """JSON lines: a header object, then one object per draw."""
    with open(path, "w") as fh:
        head = {"kind": "perturbation", "B": draws.B, "seed": draws.seed, "gDist": draws.g_dist,
                "n": draws.n, "lambda": draws.lam, "failures": list(draws.failures)}
        fh.write(json.dumps(head) + "\n")
        for b in range(draws.B):
            if b in draws.failures:
                row = {"b": b, "failed": True}
            else:
                row = {"b": b, "betaTildeStar": draws.beta_tilde_star[b].tolist(),
                       "betaHatStar": draws.beta_hat_star[b].tolist()}
            fh.write(json.dumps(row) + "\n")


def read_draws(path) -> PerturbDraws:
    lines = Path(path).read_text().splitlines()
    head = json.loads(lines[0])
    rows = [json.loads(s) for s in lines[1:]]
    good = [r for r in rows if not r.get("failed")]
    shape = np.asarray(good[0]["betaHatStar"]).shape
    bt = np.full((head["B"], *shape), np.nan)
    bh = np.full((head["B"], *shape), np.nan)
    for r in good:
        bt[r["b"]] = r["betaTildeStar"]
        bh[r["b"]] = r["betaHatStar"]
    return PerturbDraws(int(head["B"]), bt, bh, int(head["seed"]), head["gDist"], int(head["n"]),
                        float(head["lambda"]), tuple(head["failures"]))
