"""Stepdown tests for multiple regulators, adjusted p-values, and comparators.

For predictor ``j`` the statistics ``t_j^(m) = sqrt(n) |beta_hat_jm| / sigma_jm``
are tested against the sup-statistic over the still-open set ``Omega``:
the largest open statistic is rejected when it exceeds the ``psi`` quantile
of ``max_{m in Omega} t*_jm``; it then leaves ``Omega`` and the cutoff is
recomputed. To find predictors acting on at least ``k`` outcomes, the
``k - 1`` largest statistics are held out of the first step and are rejected
together with the first rejection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .permute import ReferenceDistribution

__all__ = [
    "TestResult",
    "test_stats",
    "sup_quantile",
    "cutoff_rank",
    "stepdown_single",
    "stepdown_all",
    "adjusted_pvalues",
    "marginal_pvalues",
    "sup_test",
    "bonferroni_test",
    "smrt_test",
    "run_methods",
    "result_table",
]

METHODS = ("SMRT", "MRT", "Sup", "Bonferroni")


@dataclass(frozen=True)
class TestResult:
    """Outcome of one testing method over all predictors.

    ``rejected`` is a (p, M) boolean matrix; ``rejected_sets`` lists the
    rejected outcome indices per predictor.
    """

    __test__ = False  # not a pytest class

    rejected: np.ndarray
    adj_p: np.ndarray
    t_stats: np.ndarray
    k: int
    psi: float
    method: str
    ref_kind: str
    mode: str = "predictor"

    @property
    def rejected_sets(self) -> list:
        return [tuple(np.flatnonzero(row).tolist()) for row in self.rejected]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "k": self.k,
            "psi": self.psi,
            "refKind": self.ref_kind,
            "mode": self.mode,
            "rejected": self.rejected_sets,
            "adjP": self.adj_p.tolist(),
            "tStats": self.t_stats.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def test_stats(beta, sigma, n: int) -> np.ndarray:
    """``sqrt(n) |beta| / sigma`` entrywise."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("standard errors must be positive")
    return math.sqrt(n) * np.abs(np.asarray(beta, dtype=float)) / sigma


test_stats.__test__ = False


def cutoff_rank(B: int, psi: float) -> int:
    """1-based order statistic ``ceil((B + 1) psi)`` used as the cutoff.

    A relative slack of 1e-9 absorbs rounding in ``(B + 1) * psi`` so that
    ``psi = 1 - i / (B + 1)`` lands on the integer ``B + 1 - i``.
    """
    x = (B + 1) * psi
    return max(0, math.ceil(x - 1e-9 * max(1.0, x)))


def _rows(ref) -> np.ndarray:
    return ref.values if isinstance(ref, ReferenceDistribution) else np.asarray(ref, dtype=float)


def _cutoff(draws: np.ndarray, psi: float) -> float:
    """Cutoff from the per-draw sup statistics ``draws`` (length B)."""
    B = draws.shape[0]
    if B == 0:
        raise ValueError("reference has no draws")
    r = cutoff_rank(B, psi)
    if r > B:
        return math.inf
    if r == 0:
        return -math.inf
    return float(np.partition(draws, r - 1)[r - 1])


def sup_quantile(ref, j: int, omega, psi: float) -> float:
    """Cutoff ``c_j^Omega(psi)``.

    ``ref`` is a ReferenceDistribution or a (p, M, B) array. The per-draw
    maximum over ``omega`` is formed and its ``ceil((B+1) psi)``-th order
    statistic returned (``inf`` when that rank exceeds ``B``).
    """
    if not 0.0 < psi < 1.0:
        raise ValueError("psi must lie in (0, 1)")
    omega = list(omega)
    if not omega:
        raise ValueError("omega must be non-empty")
    vals = _rows(ref)[j][omega]
    return _cutoff(vals.max(axis=0), psi)


def _order(t: np.ndarray) -> np.ndarray:
    """Indices by decreasing statistic, ties by ascending index."""
    return np.argsort(-t, kind="stable")


def _holdout(t: np.ndarray, groups: np.ndarray, k: int) -> np.ndarray:
    """Mask of the ``k - 1`` largest statistics within each group."""
    held = np.zeros(t.size, dtype=bool)
    if k <= 1:
        return held
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        held[idx[_order(t[idx])[: k - 1]]] = True
    return held


def _stepdown_core(t: np.ndarray, ref: np.ndarray, groups: np.ndarray, k: int):
    """Sequential step p-values for a flat family of hypotheses.

    ``t`` has shape (K,), ``ref`` (K, B), ``groups`` (K,) labels the
    predictor of each hypothesis. Returns the monotone adjusted p-value of
    every hypothesis; held-out hypotheses inherit the value of their group's
    first rejection and never-reachable ones get 1.

    The stepdown at level ``psi = 1 - a`` rejects the first ``i`` open
    hypotheses exactly when every step ``1..i`` has
    ``#{b : S_b >= s} + 1 <= a (B + 1)``, so the smallest rejecting ``a`` on
    the grid ``{1..B+1} / (B+1)`` is the running maximum of
    ``(1 + #{b : S_b >= s}) / (B + 1)``.
    """
    K, B = ref.shape
    held = _holdout(t, groups, k)
    live = np.flatnonzero(~held)
    order = live[_order(t[live])]
    adj = np.ones(K)
    running = 0.0
    # suffix maxima of the reference over the open set, built from the back
    sup = np.full(B, -np.inf)
    suffix = np.empty((order.size, B))
    for i in range(order.size - 1, -1, -1):
        sup = np.maximum(sup, ref[order[i]])
        suffix[i] = sup
    for i, h in enumerate(order):
        step = (1.0 + np.count_nonzero(suffix[i] >= t[h])) / (B + 1.0)
        running = max(running, step)
        adj[h] = running
    if k > 1:
        for g in np.unique(groups):
            idx = np.flatnonzero(groups == g)
            first = adj[idx[~held[idx]]].min() if np.any(~held[idx]) else 1.0
            adj[idx[held[idx]]] = first
    return adj


def _reject_at(t: np.ndarray, ref: np.ndarray, groups: np.ndarray, k: int, psi: float) -> np.ndarray:
    """Literal stepdown at quantile ``psi``: returns a rejection mask."""
    K = t.size
    held = _holdout(t, groups, k)
    open_ = list(np.flatnonzero(~held)[_order(t[~held])])
    rejected = np.zeros(K, dtype=bool)
    while open_:
        top = open_[0]
        c = _cutoff(ref[open_].max(axis=0), psi)
        if not t[top] > c:
            break
        rejected[top] = True
        open_.pop(0)
    for g in np.unique(groups[rejected]):
        rejected[(groups == g) & held] = True
    return rejected


def stepdown_single(t_row, ref_row, psi: float, k: int = 1) -> tuple:
    """Rejected outcome indices for one predictor.

    ``t_row`` has length M and ``ref_row`` shape (M, B).
    """
    t = np.asarray(t_row, dtype=float)
    ref = np.asarray(ref_row, dtype=float)
    if not 1 <= k <= t.size:
        raise ValueError("k must lie in 1..M")
    rej = _reject_at(t, ref, np.zeros(t.size, dtype=int), k, psi)
    return tuple(np.flatnonzero(rej).tolist())


def adjusted_pvalues(t_row, ref_row, k: int = 1) -> np.ndarray:
    """Smallest level ``a`` on the ``(B+1)`` grid at which each hypothesis is rejected."""
    t = np.asarray(t_row, dtype=float)
    ref = np.asarray(ref_row, dtype=float)
    if ref.shape[1] == 0:
        raise ValueError("reference has no draws")
    return _stepdown_core(t, ref, np.zeros(t.size, dtype=int), k)


def smrt_test(t, ref, psi: float, k: int = 1, mode: str = "predictor",
              method: str = "SMRT", ref_kind: str | None = None) -> TestResult:
    """Stepdown over every predictor.

    ``mode="predictor"`` tests each predictor as its own family at ``psi``;
    ``mode="all"`` runs one stepdown over all ``p M`` statistics (after
    removing each predictor's ``k - 1`` largest); ``mode="split"`` tests
    each predictor at level ``(1 - psi) / p``.
    """
    t = np.asarray(t, dtype=float)
    vals = _rows(ref)
    kind = ref_kind or (ref.kind if isinstance(ref, ReferenceDistribution) else "custom")
    p, M = t.shape
    if not 1 <= k <= M:
        raise ValueError("k must lie in 1..M")
    if vals.shape[:2] != (p, M):
        raise ValueError("reference does not match the statistic matrix")
    rej = np.zeros((p, M), dtype=bool)
    adj = np.ones((p, M))
    if mode == "all":
        groups = np.repeat(np.arange(p), M)
        flat_ref = vals.reshape(p * M, -1)
        rej = _reject_at(t.ravel(), flat_ref, groups, k, psi).reshape(p, M)
        adj = _stepdown_core(t.ravel(), flat_ref, groups, k).reshape(p, M)
    elif mode in ("predictor", "split"):
        level = psi if mode == "predictor" else 1.0 - (1.0 - psi) / p
        zeros = np.zeros(M, dtype=int)
        for j in range(p):
            rej[j] = _reject_at(t[j], vals[j], zeros, k, level)
            a = _stepdown_core(t[j], vals[j], zeros, k)
            adj[j] = np.minimum(1.0, a * p) if mode == "split" else a
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return TestResult(rej, adj, t, k, float(psi), method, kind, mode)


def stepdown_all(t, ref, psi: float, k: int = 1, mode: str = "all") -> TestResult:
    """All-predictor stepdown; ``mode="split"`` gives the per-predictor ``alpha/p`` variant."""
    return smrt_test(t, ref, psi, k, mode=mode)


def marginal_pvalues(t, ref) -> np.ndarray:
    """Per-hypothesis permutation p-values ``(1 + #{t* >= t}) / (B + 1)``."""
    t = np.asarray(t, dtype=float)
    vals = _rows(ref)
    B = vals.shape[2]
    return (1.0 + np.count_nonzero(vals >= t[..., None], axis=2)) / (B + 1.0)


def sup_test(t, ref, alpha: float, mode: str = "predictor") -> TestResult:
    """Single-step test: reject when ``t`` exceeds the first-step cutoff over every outcome."""
    t = np.asarray(t, dtype=float)
    vals = _rows(ref)
    p, M = t.shape
    psi = 1.0 - alpha
    if mode == "all":
        sup = vals.reshape(p * M, -1).max(axis=0)
        sups = np.broadcast_to(sup, (p, sup.size))
    else:
        sups = vals.max(axis=1)
    B = vals.shape[2]
    rej = np.zeros((p, M), dtype=bool)
    adj = np.ones((p, M))
    for j in range(p):
        rej[j] = t[j] > _cutoff(sups[j], psi)
        adj[j] = (1.0 + np.count_nonzero(sups[j][None, :] >= t[j][:, None], axis=1)) / (B + 1.0)
    kind = ref.kind if isinstance(ref, ReferenceDistribution) else "custom"
    return TestResult(rej, adj, t, 1, psi, "Sup", kind, mode)


def bonferroni_test(t, ref, alpha: float, mode: str = "predictor") -> TestResult:
    """Reject when the marginal permutation p-value is below ``alpha / M`` (or ``alpha / (p M)``)."""
    t = np.asarray(t, dtype=float)
    p, M = t.shape
    m_count = M if mode == "predictor" else p * M
    pm = marginal_pvalues(t, ref)
    rej = pm < alpha / m_count
    kind = ref.kind if isinstance(ref, ReferenceDistribution) else "custom"
    return TestResult(rej, np.minimum(1.0, pm * m_count), t, 1, 1.0 - alpha, "Bonferroni", kind, mode)


def run_methods(t_hat, ref_hat, t_tilde, ref_tilde, alpha: float, psi: float | None = None,
                k: int = 1, methods=METHODS, mode: str = "predictor") -> dict:
    """SMRT plus the requested comparators, keyed by method name.

    MRT is the same stepdown applied to the unpenalized statistics and their
    reference. Sup and Bonferroni are single-step and ignore ``k``.
    """
    psi = 1.0 - alpha if psi is None else psi
    out = {}
    for name in methods:
        if name == "SMRT":
            out[name] = smrt_test(t_hat, ref_hat, psi, k, mode)
        elif name == "MRT":
            out[name] = smrt_test(t_tilde, ref_tilde, psi, k, mode, method="MRT")
        elif name == "Sup":
            out[name] = sup_test(t_hat, ref_hat, alpha, "all" if mode == "all" else "predictor")
        elif name == "Bonferroni":
            out[name] = bonferroni_test(t_hat, ref_hat, alpha, "all" if mode == "all" else "predictor")
        else:
            raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")
    return out


def result_table(results: dict, predictor_names, outcome_names, beta_hat, ci=None):
    """One row per (predictor, outcome) with estimate, interval, and per-method columns."""
    import pandas as pd

    beta_hat = np.asarray(beta_hat)
    p, M = beta_hat.shape
    first = next(iter(results.values()))
    rows = {
        "predictor": np.repeat(list(predictor_names), M),
        "outcome": np.tile(list(outcome_names), p),
        "betaHat": beta_hat.ravel(),
    }
    if ci is not None:
        rows["ciLow"] = np.asarray(ci)[..., 0].ravel()
        rows["ciHigh"] = np.asarray(ci)[..., 1].ravel()
    rows["t"] = first.t_stats.ravel()
    for name, res in results.items():
        if name != "SMRT":
            rows[f"t_{name}"] = res.t_stats.ravel()
        rows[f"adjP_{name}"] = res.adj_p.ravel()
        rows[f"rejected_{name}"] = res.rejected.ravel().astype(int)
    frame = pd.DataFrame(rows)
    if "SMRT" in results:
        frame = frame.rename(columns={"adjP_SMRT": "adjP", "rejected_SMRT": "rejected"})
    return frame
