import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from postgl.model import Dataset, LossModel, MomentMatrices, RankDeficiencyError, estimate_moments
from postgl.restricted import (SeparationError, compute_beta_perp, covariance_blocks, fit_restricted,
                               is_proportional, restricted_inference_fit)


def test_gaussian_refit_is_least_squares(rng):
    n = 120
    X = rng.standard_normal((n, 5))
    y = X[:, [0, 3]] @ np.array([1.5, -2.]) + rng.standard_normal(n)
    ds = Dataset(y, X)
    E = np.array([0, 3, 4])
    fit = restricted_inference_fit(LossModel("gaussian"), ds, E)
    ols, *_ = np.linalg.lstsq(X[:, E], y, rcond=None)
    assert np.allclose(fit.beta_E, ols, atol=1e-10)
    s2 = np.sum((y - X[:, E] @ ols) ** 2) / (n - 3)
    assert np.allclose(fit.Sigma_E / n, s2 * np.linalg.inv(X[:, E].T @ X[:, E]))
    assert np.allclose(fit.A_E, 0.)
    resid = X[:, E] @ ols - y
    assert np.allclose(fit.beta_perp, X[:, [1, 2]].T @ resid / n, atol=1e-10)


@pytest.mark.parametrize("kind,link", [("logistic", lambda m: np.log(m / (1 - m))),
                                        ("poisson", np.log), ("quasi_poisson", np.log)])
def test_intercept_only_fit_is_the_link_of_the_mean(kind, link, rng):
    n = 300
    y = (rng.random(n) < 0.3).astype(float) if kind == "logistic" else rng.poisson(2.5, n).astype(float)
    ds = Dataset(y, np.ones((n, 1)))
    fit = fit_restricted(LossModel(kind), ds, np.array([0]))
    assert fit.beta_E[0] == pytest.approx(link(y.mean()), abs=1e-10)


@pytest.mark.parametrize("kind", ["logistic", "poisson"])
def test_refit_matches_a_generic_optimizer(kind, rng):
    n = 200
    X = rng.standard_normal((n, 4))
    eta = 0.5 * X[:, 0] - 0.4 * X[:, 2]
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float) if kind == "logistic" \
        else rng.poisson(np.exp(eta)).astype(float)
    ds = Dataset(y, X)
    m = LossModel(kind)
    E = np.array([0, 1, 2])
    fit = fit_restricted(m, ds, E)
    ref = minimize(lambda b: np.sum(m.rho(X[:, E] @ b, y)), np.zeros(3),
                   jac=lambda b: X[:, E].T @ m.d1(X[:, E] @ b, y), method="BFGS",
                   options={"gtol": 1e-10})
    assert np.allclose(fit.beta_E, ref.x, atol=1e-6)


@given(seed=st.integers(0, 10**6))
def test_refit_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    n = 80
    X = rng.standard_normal((n, 4))
    y = rng.poisson(np.exp(0.3 * X[:, 0])).astype(float)
    ds = Dataset(y, X)
    m = LossModel("poisson")
    E = np.array([0, 1, 3])
    perm = rng.permutation(3)
    a = fit_restricted(m, ds, E).beta_E
    b = fit_restricted(m, ds, E[perm]).beta_E
    assert np.allclose(a[perm], b, atol=1e-8)


@given(seed=st.integers(0, 10**6), k=st.integers(1, 4))
def test_covariance_blocks_for_arbitrary_moments(seed, k):
    rng = np.random.default_rng(seed)
    p = 6
    A = rng.standard_normal((p, p + 2))
    B = rng.standard_normal((p, p + 2))
    H = A @ A.T / p + 0.1 * np.identity(p)
    K = B @ B.T / p + 0.1 * np.identity(p)
    E = np.sort(rng.choice(p, k, replace=False))
    mom = MomentMatrices(H=H, K=K, E=E, beta_E=np.zeros(k), dispersion=1.)
    S_E, S_perp, A_E = covariance_blocks(mom)
    Ep = mom.Eprime
    Hi = np.linalg.inv(H[np.ix_(E, E)])
    assert np.allclose(S_E, Hi @ K[np.ix_(E, E)] @ Hi)
    assert np.allclose(S_E, S_E.T)
    assert np.linalg.eigvalsh(S_E)[0] > 0
    assert np.linalg.eigvalsh(S_perp)[0] > -1e-10
    # Sigma_perp is the Schur complement of K_EE in K restricted to (E, E')
    order = np.concatenate([E, Ep])
    Kp = K[np.ix_(order, order)]
    schur = np.linalg.inv(np.linalg.inv(Kp)[k:, k:])
    assert np.allclose(S_perp, schur, atol=1e-10)
    assert np.allclose(A_E, H[np.ix_(Ep, E)] - K[np.ix_(Ep, E)] @ np.linalg.solve(K[np.ix_(E, E)],
                                                                                    H[np.ix_(E, E)]))


def test_proportional_moments_give_zero_A(rng):
    X = rng.standard_normal((60, 4))
    ds = Dataset(rng.poisson(2., 60).astype(float), X)
    fit = restricted_inference_fit(LossModel("quasi_poisson"), ds, np.array([1, 2]))
    assert is_proportional(fit.moments)
    assert np.all(fit.A_E == 0)
    assert np.allclose(fit.Sigma_E, fit.moments.dispersion * np.linalg.inv(fit.moments.H_EE))


def test_beta_perp_formula(rng):
    n = 100
    X = rng.standard_normal((n, 5))
    ds = Dataset((rng.random(n) < 0.4).astype(float), X)
    m = LossModel("logistic")
    fit = restricted_inference_fit(m, ds, np.array([0, 4]))
    theta = X[:, [0, 4]] @ fit.beta_E
    grad = X.T @ m.d1(theta, ds.y)
    expected = grad[fit.Eprime] / n - fit.A_E @ fit.beta_E
    assert np.allclose(compute_beta_perp(m, ds, fit), expected)


def test_separation_is_reported():
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError):
        fit_restricted(LossModel("logistic"), Dataset(y, x[:, None]), np.array([0]))


def test_collinear_columns_are_named(rng):
    X = rng.standard_normal((30, 3))
    X[:, 2] = X[:, 0] + X[:, 1]
    with pytest.raises(RankDeficiencyError, match="collinear"):
        fit_restricted(LossModel("gaussian"), Dataset(rng.standard_normal(30), X), np.array([0, 1, 2]))


def test_empty_support_is_rejected(rng):
    with pytest.raises(ValueError):
        fit_restricted(LossModel("gaussian"), Dataset(rng.standard_normal(5), np.ones((5, 1))),
                       np.array([], int))
