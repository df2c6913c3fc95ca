"""Least-squares surrogate of the summed profile log-likelihoods.

Around the unpenalized estimates, ``-sum_m loglik_m(beta_m)`` is replaced by
``sum_m ||R_m (beta_tilde_m - beta_m)||^2`` where ``R_m`` is the symmetric
square root of outcome ``m``'s profile information. Blocks are kept per
outcome; the block-diagonal design is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .marginal import MarginalFit, half_matrix

__all__ = ["QuadraticSystem", "assemble", "quad_loss"]


@dataclass(frozen=True)
class QuadraticSystem:
    halves: np.ndarray       # (M, p, p)
    responses: np.ndarray    # (M, p), responses[m] = halves[m] @ beta_tilde[:, m]
    beta_tilde: np.ndarray   # (p, M)
    n: int

    @property
    def p(self) -> int:
        return self.beta_tilde.shape[0]

    @property
    def M(self) -> int:
        return self.beta_tilde.shape[1]

    @cached_property
    def infos(self) -> np.ndarray:
        """Per-outcome ``R_m' R_m`` (the profile informations), shape (M, p, p)."""
        return np.matmul(self.halves.transpose(0, 2, 1), self.halves)

    @cached_property
    def linear(self) -> np.ndarray:
        """Per-outcome ``R_m' y_m`` (equal to ``I_m beta_tilde_m``), shape (M, p)."""
        return np.matmul(self.halves.transpose(0, 2, 1), self.responses[:, :, None])[:, :, 0]

    @cached_property
    def offset(self) -> float:
        return float(np.sum(self.responses**2))

    def with_beta_tilde(self, beta_tilde) -> "QuadraticSystem":
        """Same halves, responses rebuilt from a new initial estimate."""
        bt = np.asarray(beta_tilde, dtype=float)
        return QuadraticSystem(self.halves, _responses(self.halves, bt), bt, self.n)

    def with_block(self, m: int, fit: MarginalFit) -> "QuadraticSystem":
        """Copy with outcome ``m``'s block rebuilt from ``fit``."""
        halves = self.halves.copy()
        halves[m] = half_matrix(fit.profile_info)
        bt = self.beta_tilde.copy()
        bt[:, m] = fit.beta_tilde
        return QuadraticSystem(halves, _responses(halves, bt), bt, self.n)


def _responses(halves: np.ndarray, beta_tilde: np.ndarray) -> np.ndarray:
    return np.stack([halves[m] @ beta_tilde[:, m] for m in range(halves.shape[0])])


def assemble(fits) -> QuadraticSystem:
    """Build the surrogate from a list of marginal fits (one per outcome)."""
    fits = list(fits)
    if not fits:
        raise ValueError("need at least one marginal fit")
    p, n = fits[0].p, fits[0].n
    if any(f.p != p for f in fits):
        raise ValueError("marginal fits disagree on the number of predictors")
    if any(f.n != n for f in fits):
        raise ValueError("marginal fits disagree on the number of subjects")
    halves = np.stack([half_matrix(f.profile_info) for f in fits])
    bt = np.column_stack([f.beta_tilde for f in fits])
    return QuadraticSystem(halves, _responses(halves, bt), bt, n)


def quad_loss(system: QuadraticSystem, beta) -> float:
    """``sum_m ||R_m (beta_tilde_m - beta_m)||^2`` for a p x M coefficient matrix."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != system.beta_tilde.shape:
        raise ValueError(f"beta has shape {beta.shape}, expected {system.beta_tilde.shape}")
    resid = np.einsum("mij,jm->mi", system.halves, system.beta_tilde - beta)
    return float(np.sum(resid**2))
