import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

import smrt.marginal as marginal
from smrt.data import Dataset, OutcomeColumn
from smrt.marginal import (
    ConvergenceError,
    MarginalFit,
    SeparationError,
    cumlogit_gradient,
    cumlogit_loglik,
    fit_cumulative_logit,
    fit_marginal,
    half_matrix,
    profile_loglik,
)


def _ordinal_data(seed, n=60, p=2, L=4, beta=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta = rng.normal(scale=0.7, size=p) if beta is None else np.asarray(beta)
    latent = X @ beta + rng.logistic(size=n)
    cuts = np.quantile(latent, np.linspace(0, 1, L + 1)[1:-1])
    y = np.searchsorted(cuts, latent)
    return X, y


def _loglik_reference(X, y, beta, theta):
    """Plain numpy log-likelihood with P(Y <= l) = expit(theta_l - x'beta)."""
    eta = X @ beta
    upper = np.r_[theta, np.inf]
    lower = np.r_[-np.inf, theta]
    pu = np.where(np.isinf(upper[y]), 1.0, expit(upper[y] - eta))
    pl = np.where(np.isinf(lower[y]), 0.0, expit(lower[y] - eta))
    return np.sum(np.log(pu - pl))


def test_loglik_matches_reference():
    X, y = _ordinal_data(0)
    beta, theta = np.array([0.3, -0.2]), np.array([-1.0, 0.1, 1.2])
    assert_allclose(cumlogit_loglik(X, y, 4, beta, theta), _loglik_reference(X, y, beta, theta), rtol=1e-12)


def test_balanced_binary_gives_zero():
    x = np.repeat([0.0, 1.0, 2.0], 4)[:, None]
    y = np.tile([0, 1, 1, 0], 3)
    fit = fit_cumulative_logit(x, y, 2)
    assert fit.beta_tilde[0] == 0.0


def _grid_argmax(X, y, lo, hi, rounds=12, pts=31):
    """Zooming grid search over (beta, theta1, theta2)."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    best = None
    for _ in range(rounds):
        axes = [np.linspace(a, b, pts) for a, b in zip(lo, hi)]
        B, T1, T2 = np.meshgrid(*axes, indexing="ij")
        eta = X[:, 0][:, None] * B.ravel()[None, :]
        t1, t2 = T1.ravel()[None, :], T2.ravel()[None, :]
        p0 = expit(t1 - eta)
        p1 = expit(t2 - eta) - p0
        p2 = 1 - expit(t2 - eta)
        probs = np.where(y[:, None] == 0, p0, np.where(y[:, None] == 1, p1, p2))
        with np.errstate(invalid="ignore", divide="ignore"):
            ll = np.log(np.where(probs > 0, probs, np.nan)).sum(axis=0)
        k = np.nanargmax(ll)
        best = np.array([B.ravel()[k], T1.ravel()[k], T2.ravel()[k]])
        width = (hi - lo) / (pts - 1) * 3
        lo, hi = best - width, best + width
    return best


def test_matches_grid_search_maximizer():
    X, y = _ordinal_data(3, n=30, p=1, L=3)
    fit = fit_cumulative_logit(X, y, 3)
    best = _grid_argmax(X, y, [-4, -4, -4], [4, 4, 4])
    assert_allclose(fit.beta_tilde[0], best[0], atol=1e-4)
    assert_allclose(fit.thresholds, best[1:], atol=1e-4)


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_gradient_finite_differences(seed):
    X, y = _ordinal_data(seed, n=40, p=3, L=4)
    rng = np.random.default_rng(seed + 100)
    p = X.shape[1]
    h = 1e-5
    for _ in range(5):
        beta = rng.normal(scale=0.5, size=p)
        theta = np.sort(rng.normal(size=3)) + np.array([-0.5, 0.0, 0.5])
        g = cumlogit_gradient(X, y, 4, beta, theta)
        x0 = np.r_[beta, theta]
        num = np.empty_like(x0)
        for k in range(x0.size):
            e = np.zeros_like(x0)
            e[k] = h
            fp = cumlogit_loglik(X, y, 4, (x0 + e)[:p], (x0 + e)[p:])
            fm = cumlogit_loglik(X, y, 4, (x0 - e)[:p], (x0 - e)[p:])
            num[k] = (fp - fm) / (2 * h)
        assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-6


def test_profile_information_is_negative_profile_hessian():
    X, y = _ordinal_data(21, n=80, p=2, L=3)
    fit = fit_cumulative_logit(X, y, 3)
    h = 1e-4
    b0 = fit.beta_tilde
    H = np.empty((2, 2))
    f = lambda b: profile_loglik(X, y, 3, b, fit.thresholds)  # noqa: E731
    for a in range(2):
        for c in range(2):
            ea, ec = np.eye(2)[a] * h, np.eye(2)[c] * h
            H[a, c] = (f(b0 + ea + ec) - f(b0 + ea - ec) - f(b0 - ea + ec) + f(b0 - ea - ec)) / (4 * h * h)
    assert_allclose(fit.profile_info, -H, rtol=1e-4)


def test_fit_invariants():
    X, y = _ordinal_data(5, n=120, p=3, L=5)
    fit = fit_cumulative_logit(X, y, 5)
    assert np.all(np.diff(fit.thresholds) > 0)
    assert_allclose(fit.profile_info, fit.profile_info.T)
    assert np.linalg.eigvalsh(fit.profile_info)[0] > 0
    assert np.all(np.abs(fit.scores.sum(axis=0)) < 1e-6 * fit.n)
    assert np.all(np.isfinite(fit.sigma_tilde)) and np.all(fit.sigma_tilde > 0)
    assert_allclose(fit.sigma_tilde, np.sqrt(fit.n * np.diag(np.linalg.inv(fit.profile_info))))
    # the empirical score covariance estimates the same information
    assert_allclose(np.diag(fit.scores.T @ fit.scores), np.diag(fit.profile_info), rtol=0.3)


def test_recovers_positive_coefficient():
    X, y = _ordinal_data(8, n=3000, p=2, L=5, beta=[1.0, -0.5])
    fit = fit_cumulative_logit(X, y, 5)
    assert_allclose(fit.beta_tilde, [1.0, -0.5], atol=4 * fit.sigma_tilde.max() / np.sqrt(fit.n))


def test_loglik_nondecreasing_over_iterations(monkeypatch):
    X, y = _ordinal_data(9, n=100, p=3, L=4, beta=[2.0, -1.0, 0.5])
    seen = []
    orig = marginal._derivs

    def spy(*args):
        out = orig(*args)
        seen.append(out[0])
        return out

    monkeypatch.setattr(marginal, "_derivs", spy)
    fit_cumulative_logit(X, y, 4)
    assert len(seen) > 3
    assert np.all(np.diff(seen[:-1]) >= -1e-12)


def test_separation_is_reported():
    x = np.linspace(-1, 1, 20)[:, None]
    y = (x[:, 0] > 0).astype(int)
    with pytest.raises((SeparationError, ConvergenceError)):
        fit_cumulative_logit(x, y, 2)


def test_warm_start_and_serialization():
    X, y = _ordinal_data(6, n=90, p=2, L=3)
    ds = Dataset(X, (OutcomeColumn("ordinal", 3, y),))
    fit = fit_marginal(ds, 0)
    warm = fit_marginal(ds, 0, init=fit)
    assert warm.iterations == 0
    assert_allclose(warm.beta_tilde, fit.beta_tilde)
    back = MarginalFit.from_dict(fit.to_dict())
    for name in ("beta_tilde", "thresholds", "profile_info", "scores", "sigma_tilde"):
        assert_array_equal(getattr(back, name), getattr(fit, name))
    with pytest.raises(IndexError):
        fit_marginal(ds, 1)


class TestHalfMatrix:
    def test_identity(self):
        assert_allclose(half_matrix(np.eye(4)), np.eye(4), atol=1e-15)

    def test_diagonal(self):
        assert_allclose(half_matrix(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    def test_tiny_negative_eigenvalue_clipped(self):
        A = np.diag([1.0, -1e-13])
        R = half_matrix(A)
        assert_allclose(R, np.diag([1.0, 0.0]))

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="not positive semidefinite"):
            half_matrix(np.diag([1.0, -0.1]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_reconstruction(self, seed):
        rng = np.random.default_rng(seed)
        G = rng.normal(size=(6, 6))
        A = G @ G.T + 0.1 * np.eye(6)
        R = half_matrix(A)
        assert np.max(np.abs(R.T @ R - A)) < 1e-10
        assert_array_equal(R, R.T)
