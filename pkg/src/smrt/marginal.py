"""Marginal proportional-odds fits, one outcome at a time.

Each outcome follows a cumulative-logit model

    P(Y <= l | x) = expit(theta_l - x'beta),   l = 0, ..., L-2,

so positive ``beta`` shifts mass toward higher levels. Binary outcomes are the
``L = 2`` case of the same code. The thresholds are nuisance parameters; the
fit reports the profile information for ``beta`` (the Schur complement of the
observed information) and the per-subject efficient scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .data import Dataset

__all__ = [
    "ConvergenceError",
    "SeparationError",
    "MarginalFit",
    "fit_marginal",
    "fit_cumulative_logit",
    "cumlogit_loglik",
    "cumlogit_gradient",
    "profile_loglik",
    "half_matrix",
]

MAX_ITER = 100
GRAD_TOL = 1e-8
MAX_HALVINGS = 20
RIDGE = 1e-8
SEPARATION_TOL = 1e-8


class ConvergenceError(RuntimeError):
    """Newton iterations did not reach the gradient tolerance."""


class SeparationError(RuntimeError):
    """The profile information is singular (separable or collinear design)."""


@njit(cache=True)
def _expit(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def _obs_terms(l, L, eta, theta):
    """Return log P, u, v, f'(a)/P, f'(b)/P for one subject at level ``l``."""
    if l < L - 1:
        a = theta[l] - eta
        Fa = _expit(a)
        fa = Fa * (1.0 - Fa)
        dfa = fa * (1.0 - 2.0 * Fa)
    else:
        a = np.inf
        Fa, fa, dfa = 1.0, 0.0, 0.0
    if l > 0:
        b = theta[l - 1] - eta
        Fb = _expit(b)
        fb = Fb * (1.0 - Fb)
        dfb = fb * (1.0 - 2.0 * Fb)
    else:
        b = -np.inf
        Fb, fb, dfb = 0.0, 0.0, 0.0
    if l == 0:
        P = Fa
    elif l == L - 1:
        P = _expit(-b)
    elif b > 0.0:
        P = _expit(-b) - _expit(-a)
    else:
        P = Fa - Fb
    if P <= 0.0:
        return -np.inf, 0.0, 0.0, 0.0, 0.0
    return math.log(P), fa / P, fb / P, dfa / P, dfb / P


@njit(cache=True)
def _loglik(X, y, L, beta, theta):
    n, p = X.shape
    total = 0.0
    for i in range(n):
        eta = 0.0
        for j in range(p):
            eta += X[i, j] * beta[j]
        lp, u, v, ra, rb = _obs_terms(y[i], L, eta, theta)
        total += lp
    return total


@njit(cache=True)
def _derivs(X, y, L, beta, theta):
    """Log-likelihood, gradient and Hessian in (beta, theta) coordinates."""
    n, p = X.shape
    q = p + L - 1
    grad = np.zeros(q)
    hess = np.zeros((q, q))
    total = 0.0
    for i in range(n):
        eta = 0.0
        for j in range(p):
            eta += X[i, j] * beta[j]
        l = y[i]
        lp, u, v, ra, rb = _obs_terms(l, L, eta, theta)
        total += lp
        d_eta = -(u - v)
        h_ee = (ra - rb) - (u - v) * (u - v)
        for j in range(p):
            xj = X[i, j]
            grad[j] += xj * d_eta
            for k in range(j + 1):
                hess[j, k] += xj * X[i, k] * h_ee
        if l < L - 1:
            t = p + l
            grad[t] += u
            hess[t, t] += ra - u * u
            h_et = -ra + (u - v) * u
            for j in range(p):
                hess[t, j] += X[i, j] * h_et
        if l > 0:
            s = p + l - 1
            grad[s] -= v
            hess[s, s] += -rb - v * v
            h_es = rb - (u - v) * v
            for j in range(p):
                hess[s, j] += X[i, j] * h_es
        if 0 < l < L - 1:
            hess[p + l, p + l - 1] += u * v
    for j in range(q):
        for k in range(j):
            hess[k, j] = hess[j, k]
    return total, grad, hess


@njit(cache=True)
def _scores(X, y, L, beta, theta):
    """Per-subject score vectors in (beta, theta) coordinates, n x q."""
    n, p = X.shape
    S = np.zeros((n, p + L - 1))
    for i in range(n):
        eta = 0.0
        for j in range(p):
            eta += X[i, j] * beta[j]
        l = y[i]
        lp, u, v, ra, rb = _obs_terms(l, L, eta, theta)
        for j in range(p):
            S[i, j] = -X[i, j] * (u - v)
        if l < L - 1:
            S[i, p + l] += u
        if l > 0:
            S[i, p + l - 1] -= v
    return S


def _thresholds(theta1: float, delta: np.ndarray) -> np.ndarray:
    return theta1 + np.concatenate(([0.0], np.cumsum(np.exp(delta))))


def _to_increments(theta: np.ndarray) -> tuple[float, np.ndarray]:
    return float(theta[0]), np.log(np.diff(theta))


def cumlogit_loglik(X, y, levels: int, beta, theta) -> float:
    """Log-likelihood of the cumulative-logit model at (beta, theta)."""
    return float(_loglik(np.ascontiguousarray(X, dtype=float), np.asarray(y, dtype=np.int64),
                         int(levels), np.asarray(beta, dtype=float), np.asarray(theta, dtype=float)))


def cumlogit_gradient(X, y, levels: int, beta, theta) -> np.ndarray:
    """Analytic gradient with respect to ``(beta, theta)``."""
    _, g, _ = _derivs(np.ascontiguousarray(X, dtype=float), np.asarray(y, dtype=np.int64),
                      int(levels), np.asarray(beta, dtype=float), np.asarray(theta, dtype=float))
    return g


def _initial_thresholds(y: np.ndarray, L: int) -> np.ndarray:
    cum = np.cumsum(np.bincount(y, minlength=L))[:-1] / y.size
    cum = np.clip(cum, 1e-6, 1 - 1e-6)
    return np.log(cum / (1 - cum))


def _solve_spd(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        c = np.linalg.cholesky(A)
        ridged = False
    except np.linalg.LinAlgError:
        c = np.linalg.cholesky(A + RIDGE * np.eye(A.shape[0]))
        ridged = True
    z = np.linalg.solve(c, b)
    return np.linalg.solve(c.T, z), ridged


def _newton(X, y, L, beta, theta, fixed_beta=False, max_iter=MAX_ITER, tol=GRAD_TOL):
    """Maximize the log-likelihood; returns (beta, theta, loglik, iterations, ridged)."""
    p = X.shape[1]
    theta1, delta = _to_increments(theta)
    ll, g, H = _derivs(X, y, L, beta, theta)
    ridged = False
    for it in range(max_iter + 1):
        free = slice(p, None) if fixed_beta else slice(None)
        gf = g[free]
        if np.max(np.abs(gf)) < tol:
            return beta, theta, ll, it, ridged
        if it == max_iter:
            break
        try:
            step, r = _solve_spd(-H[free, free], gf)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("observed information is singular") from exc
        ridged |= r
        if fixed_beta:
            d_beta, d_theta = np.zeros(p), step
        else:
            d_beta, d_theta = step[:p], step[p:]
        # pull the theta-space direction back to (theta1, log-increment) coordinates
        d_theta1 = d_theta[0]
        d_delta = np.diff(d_theta) / np.exp(delta)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            nb = beta + t * d_beta
            nt1, nd = theta1 + t * d_theta1, delta + t * d_delta
            nth = _thresholds(nt1, nd)
            nll = _loglik(X, y, L, nb, nth)
            if np.isfinite(nll) and nll >= ll:
                break
            t *= 0.5
        else:
            # no ascent possible: accept only if already numerically stationary
            if np.max(np.abs(gf)) < 1e-6 * max(1.0, abs(ll)):
                return beta, theta, ll, it, ridged
            raise ConvergenceError("step-halving failed to increase the log-likelihood")
        beta, theta1, delta, theta = nb, nt1, nd, nth
        ll, g, H = _derivs(X, y, L, beta, theta)
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations")


@dataclass(frozen=True)
class MarginalFit:
    """Unpenalized fit for one outcome.

    ``sigma_tilde`` is ``sqrt(n * diag(inv(profile_info)))``, the model-based
    standard error of ``sqrt(n) * (beta_tilde - beta0)``.
    """

    m: int
    beta_tilde: np.ndarray
    thresholds: np.ndarray
    profile_info: np.ndarray
    scores: np.ndarray
    sigma_tilde: np.ndarray
    loglik: float
    n: int
    iterations: int = 0
    ridged: bool = False

    @property
    def p(self) -> int:
        return self.beta_tilde.size

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "betaTilde": self.beta_tilde.tolist(),
            "thresholds": self.thresholds.tolist(),
            "profileInfo": self.profile_info.tolist(),
            "scores": self.scores.tolist(),
            "sigmaTilde": self.sigma_tilde.tolist(),
            "logLik": self.loglik,
            "iterations": self.iterations,
            "ridged": self.ridged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarginalFit":
        return cls(
            m=int(d["m"]),
            beta_tilde=np.asarray(d["betaTilde"], dtype=float),
            thresholds=np.asarray(d["thresholds"], dtype=float),
            profile_info=np.asarray(d["profileInfo"], dtype=float),
            scores=np.asarray(d["scores"], dtype=float).reshape(int(d["n"]), -1),
            sigma_tilde=np.asarray(d["sigmaTilde"], dtype=float),
            loglik=float(d["logLik"]),
            n=int(d["n"]),
            iterations=int(d.get("iterations", 0)),
            ridged=bool(d.get("ridged", False)),
        )


def fit_cumulative_logit(X, y, levels: int, m: int = 0, init: MarginalFit | None = None) -> MarginalFit:
    """Fit the cumulative-logit model to a single outcome by Newton-Raphson.

    Parameters
    ----------
    X : (n, p) array
    y : (n,) integer array of levels in ``0..levels-1``
    levels : number of categories ``L``
    m : outcome index recorded on the result
    init : optional previous fit used as the starting point

    Raises
    ------
    ConvergenceError, SeparationError
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n, p = X.shape
    L = int(levels)
    if init is not None:
        beta0, theta0 = init.beta_tilde.copy(), init.thresholds.copy()
    else:
        beta0, theta0 = np.zeros(p), _initial_thresholds(y, L)
    beta, theta, ll, iters, ridged = _newton(X, y, L, beta0, theta0)

    _, _, H = _derivs(X, y, L, beta, theta)
    info = -H
    i_bb, i_bt, i_tt = info[:p, :p], info[:p, p:], info[p:, p:]
    try:
        proj = np.linalg.solve(i_tt, i_bt.T).T  # I_bt I_tt^{-1}
    except np.linalg.LinAlgError as exc:
        raise SeparationError("threshold information is singular") from exc
    prof = i_bb - proj @ i_bt.T
    prof = 0.5 * (prof + prof.T)
    # scale-free check: information relative to each predictor's sum of squares
    # collapses toward zero when the fitted probabilities degenerate (separation)
    ss = np.sqrt(np.maximum(np.einsum("ij,ij->j", X, X), np.finfo(float).tiny))
    eig = np.linalg.eigvalsh(prof / np.outer(ss, ss))
    if eig[0] <= SEPARATION_TOL:
        raise SeparationError("profile information is numerically singular (separated design?)")
    S = _scores(X, y, L, beta, theta)
    phi = S[:, :p] - S[:, p:] @ proj.T
    cov = np.linalg.inv(prof)
    sigma = np.sqrt(n * np.diag(cov))
    return MarginalFit(
        m=m,
        beta_tilde=beta,
        thresholds=theta,
        profile_info=prof,
        scores=phi,
        sigma_tilde=sigma,
        loglik=float(ll),
        n=n,
        iterations=iters,
        ridged=ridged,
    )


def fit_marginal(dataset: Dataset, m: int, init: MarginalFit | None = None) -> MarginalFit:
    """Fit outcome ``m`` of ``dataset``."""
    if not 0 <= m < dataset.M:
        raise IndexError(f"outcome index {m} out of range for M={dataset.M}")
    col = dataset.outcomes[m]
    return fit_cumulative_logit(dataset.X, col.values, col.levels, m=m, init=init)


def profile_loglik(X, y, levels: int, beta, init_theta=None) -> float:
    """Log-likelihood at ``beta`` with the thresholds maximized out."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    beta = np.asarray(beta, dtype=float)
    theta = _initial_thresholds(y, int(levels)) if init_theta is None else np.asarray(init_theta, float)
    _, _, ll, _, _ = _newton(X, y, int(levels), beta, theta, fixed_beta=True)
    return float(ll)


def half_matrix(info) -> np.ndarray:
    """Symmetric square root ``R`` of a PSD matrix, with ``R.T @ R == info``.

    Eigenvalues down to ``-1e-10 * ||info||`` are treated as zero.
    """
    A = np.asarray(info, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("half_matrix needs a square matrix")
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    scale = max(np.max(np.abs(w)), np.finfo(float).tiny) if w.size else 1.0
    if w.size and w[0] < -1e-10 * scale:
        raise ValueError("matrix is not positive semidefinite")
    w = np.clip(w, 0.0, None)
    R = (V * np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)
