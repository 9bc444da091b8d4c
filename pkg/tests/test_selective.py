import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import brentq, minimize

from postgl.checks import (check_barrier, check_jacobian_chain, check_scalar_gstar, gaussian_instance,
                           instance_problem, random_groups)
from postgl.glasso import default_lambda, draw_randomization, solve_group_lasso
from postgl.model import Dataset, LossModel, estimate_moments
from postgl.selective import (EmptySelectionError, barrier, brute_force_loglik, build_problem,
                              grad_log_jacobian, hess_log_jacobian, inverse_fisher, log_jacobian,
                              observed_fisher, orthogonal_completion, pi_map, selective_inference,
                              selective_mle, shortcut_parameters, solve_gstar, variance_bound)


def small_instance(rng, max_active=3, **kw):
    while True:
        ds, groups, pen, rand, sol = gaussian_instance(rng, **kw)
        if sol.E.size <= max_active:
            return ds, groups, pen, rand, sol


def logistic_instance(rng, n=300, p=6, explicit_omega=False):
    model = LossModel("logistic")
    while True:
        X = rng.standard_normal((n, p))
        y = (rng.random(n) < 1 / (1 + np.exp(-(0.8 * X[:, 0] - 0.6 * X[:, 1])))).astype(float)
        ds = Dataset(y, X)
        groups = random_groups(rng, p, 3)
        pen = default_lambda(ds, groups, 0.25)
        if explicit_omega:
            A = rng.standard_normal((p, p))
            rand = draw_randomization("explicit", 1., None, rng, n, Omega=A @ A.T / p + 0.2 * np.identity(p))
        else:
            H = estimate_moments(model, ds, np.zeros(0), np.zeros(0, int)).H
            rand = draw_randomization("scaled_H", 1., H, rng, n)
        sol = solve_group_lasso(model, ds, groups, pen, rand)
        if not sol.empty and sol.E.size <= 3:
            fit, prob = instance_problem(model, ds, groups, rand, sol)
            return fit, prob


def _fd_hessian(fun, x, h):
    k = x.size
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h[i]
            ej[j] = h[j]
            out[i, j] = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) \
                / (4 * h[i] * h[j])
    return out


def _check_against_brute_force(prob):
    mle = selective_mle(prob)
    fisher = observed_fisher(prob)
    se = np.sqrt(np.diag(np.linalg.inv(fisher)))
    negll = lambda b: -brute_force_loglik(prob, bstar=b)
    start = mle + 0.5 * se * np.random.default_rng(0).standard_normal(mle.size)
    ref = minimize(negll, start, method="BFGS", options={"gtol": 1e-10, "xrtol": 1e-12})
    ref = minimize(negll, ref.x, method="Nelder-Mead",
                   options={"xatol": 1e-9 * se.min(), "fatol": 1e-14, "maxiter": 20000})
    assert np.max(np.abs(ref.x - mle) / se) < 1e-4
    H_fd = _fd_hessian(negll, mle, 1e-3 * se)
    rel = np.max(np.abs(H_fd - fisher)) / np.max(np.abs(fisher))
    assert rel < 1e-3


def test_mle_and_fisher_match_brute_force_gaussian(rng):
    model = LossModel("gaussian")
    for _ in range(4):
        ds, groups, pen, rand, sol = small_instance(rng)
        _, prob = instance_problem(model, ds, groups, rand, sol)
        _check_against_brute_force(prob)


@pytest.mark.parametrize("explicit", [False, True])
def test_mle_and_fisher_match_brute_force_logistic(rng, explicit):
    _, prob = logistic_instance(rng, explicit_omega=explicit)
    _check_against_brute_force(prob)


def test_jacobian_chain_and_singletons(rng):
    name, ok, detail = check_jacobian_chain(rng, n_instances=10)
    assert ok, detail


def test_jacobian_is_the_determinant_of_its_matrix(rng):
    model = LossModel("gaussian")
    ds, groups, pen, rand, sol = gaussian_instance(rng, base_lambda=0.15)
    _, prob = instance_problem(model, ds, groups, rand, sol)
    g = rng.uniform(0.5, 3., prob.n_groups)
    M = np.diag(g[prob.jacobian_blocks]) + prob.U_bar.T @ np.linalg.solve(prob.H_EE,
                                                                          np.diag(prob.Lambda_E) @ prob.U_bar)
    expected = np.linalg.slogdet(M)[1] if M.size else 0.
    assert log_jacobian(prob, g) == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_barrier_and_scalar_norm_problem(rng):
    assert check_barrier(rng)[1]
    name, ok, detail = check_scalar_gstar(rng)
    assert ok, detail
    assert barrier(np.array([1.])) == pytest.approx(np.log(2.))


def test_singleton_groups_reduce_to_a_scalar_computation(rng):
    """All-singleton selection of one variable, against a hand-written scalar version."""
    model = LossModel("gaussian")
    for _ in range(5):
        while True:
            ds, groups, pen, rand, sol = gaussian_instance(rng, max_size=1)
            if sol.E.size == 1:
                break
        _, prob = instance_problem(model, ds, groups, rand, sol)
        assert log_jacobian(prob, np.array([2.3])) == 0.
        # scalar version: g* solves (g - m)/w + d/dg log(1 + 1/g) = 0 with J = 1
        a, bb, w = prob.A_bar[0, 0], prob.b_bar[0], prob.Omega_bar[0, 0]
        beta = prob.beta_E_scaled[0]
        m = a * beta + bb
        g = brentq(lambda x: (x - m) / w - 1 / (x * (x + 1)), 1e-12, abs(m) + 100 * np.sqrt(w) + 10,
                   xtol=1e-14)
        sig = prob.Sigma_E[0, 0]
        theta = 1 / (1 / sig - a * a / w + prob.AOA_cal[0, 0])
        R = theta / sig
        s = prob.s_bar[0]
        mle = ((beta - s) / R + sig * a * (m - g) / w) / np.sqrt(prob.n)
        q = 1 / w + 1 / g ** 2 - 1 / (g + 1) ** 2
        M = 1 / theta + a * a / w - (a / w) ** 2 / q
        fisher = prob.n / (sig * M * sig)
        assert selective_mle(prob)[0] == pytest.approx(mle, rel=1e-8)
        assert observed_fisher(prob)[0, 0] == pytest.approx(fisher, rel=1e-8)


def test_sign_flip_equivariance(rng):
    """Flipping the sign of a selected column flips its estimate and nothing else."""
    model = LossModel("gaussian")
    ds, groups, pen, rand, sol = small_instance(rng)
    _, prob = instance_problem(model, ds, groups, rand, sol)
    j = sol.E[0]
    D = np.ones(ds.p)
    D[j] = -1.
    ds2 = Dataset(ds.y, ds.X * D)
    rand2 = draw_randomization("explicit", rand.f, None, rng, ds.n, Omega=rand.Omega * np.outer(D, D))
    rand2.omega = rand.omega * D
    sol2 = solve_group_lasso(model, ds2, groups, pen, rand2)
    assert np.array_equal(sol.E, sol2.E)
    _, prob2 = instance_problem(model, ds2, groups, rand2, sol2)
    a = selective_inference(prob)
    b = selective_inference(prob2)
    Dk = D[sol.E]
    assert np.allclose(b.mle, Dk * a.mle, rtol=1e-6, atol=1e-9)
    assert np.allclose(b.cov, a.cov * np.outer(Dk, Dk), rtol=1e-6, atol=1e-12)


def test_shortcut_matches_general_construction(rng):
    model = LossModel("gaussian")
    for _ in range(20):
        ds, groups, pen, rand, sol = gaussian_instance(rng)
        _, prob = instance_problem(model, ds, groups, rand, sol)
        A, b, O = shortcut_parameters(prob.H_EE, prob.U_hat, prob.Lambda_E, prob.cond.u, rand.f)
        assert np.allclose(A, prob.A_bar, rtol=1e-10, atol=1e-10)
        assert np.allclose(b, prob.b_bar, rtol=1e-10, atol=1e-10)
        assert np.allclose(O, prob.Omega_bar, rtol=1e-10, atol=1e-10)


def test_reconstruction_of_the_randomization(rng):
    model = LossModel("gaussian")
    for _ in range(20):
        ds, groups, pen, rand, sol = gaussian_instance(rng)
        _, prob = instance_problem(model, ds, groups, rand, sol)
        rec = pi_map(prob, prob.beta_E_scaled, np.sqrt(ds.n) * prob.cond.beta_perp, prob.gamma_scaled,
                     prob.cond.u, prob.cond.z)
        assert np.allclose(rec, rand.sqrt_n_omega, rtol=1e-8, atol=1e-8 * np.abs(rand.sqrt_n_omega).max())


@given(seed=st.integers(0, 10**6), d=st.integers(1, 6))
def test_orthogonal_completion(seed, d):
    u = np.random.default_rng(seed).standard_normal(d)
    u /= np.linalg.norm(u)
    Q = orthogonal_completion(u)
    assert Q.shape == (d, d - 1)
    assert np.allclose(Q.T @ Q, np.identity(d - 1), atol=1e-12)
    assert np.allclose(Q.T @ u, 0., atol=1e-12)


def test_variance_bound_holds(rng):
    model = LossModel("gaussian")
    for _ in range(20):
        ds, groups, pen, rand, sol = gaussian_instance(rng)
        _, prob = instance_problem(model, ds, groups, rand, sol)
        g = solve_gstar(prob, prob.beta_E_scaled)
        assert np.max(np.abs(inverse_fisher(prob, g))) <= variance_bound(prob) * (1 + 1e-10)
        assert np.allclose(np.linalg.inv(observed_fisher(prob, gstar=g)), inverse_fisher(prob, g),
                           rtol=1e-8)


def test_gstar_is_stationary_and_positive(rng):
    model = LossModel("gaussian")
    ds, groups, pen, rand, sol = gaussian_instance(rng, base_lambda=0.15)
    _, prob = instance_problem(model, ds, groups, rand, sol, barrier_c=0.)
    g = solve_gstar(prob, prob.beta_E_scaled)
    assert np.all(g > 0)
    r = g - (prob.A_bar @ prob.beta_E_scaled + prob.b_bar)
    grad = prob.Omega_bar_inv @ r - grad_log_jacobian(prob, g) - 1 / g + 1 / (g + 1)
    assert np.max(np.abs(grad)) < 1e-8
    assert np.linalg.eigvalsh(prob.Omega_bar_inv - hess_log_jacobian(prob, g))[0] > 0


def test_problem_arrays_are_read_only(rng):
    ds, groups, pen, rand, sol = gaussian_instance(rng)
    _, prob = instance_problem(LossModel("gaussian"), ds, groups, rand, sol)
    with pytest.raises(ValueError):
        prob.A_bar[0, 0] = 1.
    with pytest.raises(Exception):
        prob.n = 3


def test_empty_selection_is_rejected(rng):
    ds, groups, pen, rand, sol = gaussian_instance(rng)
    empty = solve_group_lasso(LossModel("gaussian"), ds, groups, pen.scaled(1e4), rand)
    fit, _ = instance_problem(LossModel("gaussian"), ds, groups, rand, sol)
    with pytest.raises(EmptySelectionError):
        build_problem(fit, empty, rand)
