"""
Fast invariant checks on random instances, run by ``postgl selftest``.

Each check returns ``(name, passed, detail)``.
"""

import numpy as np
from scipy.optimize import brentq

from .glasso import Penalty, default_lambda, draw_randomization, solve_group_lasso
from .model import Dataset, GroupStructure, LossModel, estimate_moments
from .restricted import restricted_inference_fit
from .selective import (barrier, build_problem, grad_barrier, grad_log_jacobian, hess_barrier,
                        hess_log_jacobian, log_jacobian, pi_map, selective_inference,
                        shortcut_parameters, solve_gstar)


def random_groups(rng, p, max_size=4):
    sizes = []
    while sum(sizes) < p:
        sizes.append(int(min(rng.integers(1, max_size + 1), p - sum(sizes))))
    return GroupStructure(np.split(np.arange(p), np.cumsum(sizes)[:-1]), p=p)


def gaussian_instance(rng, n=None, p=None, f=None, base_lambda=None, max_size=4, signal=0.3,
                      nonempty=True, tries=20):
    """
    Random Gaussian-loss problem with ``Omega = f X^T X / n`` and the
    solution of the randomized group lasso.

    Returns ``(ds, groups, penalty, rand, sol)``; with ``nonempty`` the
    draw is repeated until something is selected.
    """
    model = LossModel("gaussian")
    for _ in range(tries):
        nn = int(rng.integers(40, 200)) if n is None else n
        pp = int(rng.integers(3, 12)) if p is None else p
        X = rng.standard_normal((nn, pp))
        groups = random_groups(rng, pp, max_size)
        beta = np.zeros(pp)
        beta[groups[0]] = signal * rng.choice([-1, 1], size=groups[0].size)
        y = X @ beta + rng.standard_normal(nn)
        ds = Dataset(y, X)
        bl = rng.uniform(0.1, 0.5) if base_lambda is None else base_lambda
        penalty = default_lambda(ds, groups, bl)
        ff = rng.uniform(0.3, 2.) if f is None else f
        H = estimate_moments(model, ds, np.zeros(0), np.zeros(0, int)).H
        rand = draw_randomization("scaled_H", ff, H, rng, nn)
        sol = solve_group_lasso(model, ds, groups, penalty, rand)
        if not nonempty or not sol.empty:
            return ds, groups, penalty, rand, sol
    raise RuntimeError("no nonempty selection in %d draws" % tries)


def instance_problem(model, ds, groups, rand, sol, barrier_c=0.):
    Eprime = groups.columns(sol.inactive_groups)
    fit = restricted_inference_fit(model, ds, sol.E, groups, beta0=sol.beta_lasso[sol.E], Eprime=Eprime)
    return fit, build_problem(fit, sol, rand, barrier_c=barrier_c, check_shortcut=False)


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b)))) if a.size else 0.


def check_kkt(rng, n_instances=50):
    model = LossModel("gaussian")
    worst = [0., 0., 0.]
    for _ in range(n_instances):
        ds, groups, penalty, rand, sol = gaussian_instance(rng)
        worst[0] = max(worst[0], sol.kkt_residual)
        worst[1] = max(worst[1], sol.max_z_norm - 1)
        fit, prob = instance_problem(model, ds, groups, rand, sol)
        sqn = np.sqrt(ds.n)
        rec = pi_map(prob, prob.beta_E_scaled, sqn * prob.cond.beta_perp, prob.gamma_scaled,
                     prob.cond.u, prob.cond.z)
        worst[2] = max(worst[2], _rel(rec, rand.sqrt_n_omega))
    ok = worst[0] < 1e-6 and worst[1] <= 1e-8 and worst[2] < 1e-8
    return ("KKT and randomization reconstruction", ok,
            "max stationarity %.2e, max ||z||-1 %.2e, reconstruction %.2e" % tuple(worst))


def _fd_grad(fun, x, h=1e-6):
    g = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h * max(1., abs(x[i]))
        g[i] = (fun(x + e) - fun(x - e)) / (2 * e[i])
    return g


def _fd_jac(fun, x, h=1e-6):
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h * max(1., abs(x[i]))
        cols.append((fun(x + e) - fun(x - e)) / (2 * e[i]))
    return np.column_stack(cols)


def check_jacobian_chain(rng, n_instances=30):
    model = LossModel("gaussian")
    worst_g = worst_h = 0.
    singleton_ok = True
    for _ in range(n_instances):
        ds, groups, penalty, rand, sol = gaussian_instance(rng, base_lambda=0.15)
        _, prob = instance_problem(model, ds, groups, rand, sol)
        g = rng.uniform(0.5, 5., prob.n_groups)
        worst_g = max(worst_g, _rel(grad_log_jacobian(prob, g), _fd_grad(lambda x: log_jacobian(prob, x), g)))
        worst_h = max(worst_h, _rel(hess_log_jacobian(prob, g), _fd_jac(lambda x: grad_log_jacobian(prob, x), g)))
        ds, groups, penalty, rand, sol = gaussian_instance(rng, max_size=1)
        _, prob = instance_problem(model, ds, groups, rand, sol)
        singleton_ok &= log_jacobian(prob, np.ones(prob.n_groups)) == 0.
    ok = worst_g < 1e-5 and worst_h < 1e-5 and singleton_ok
    return ("Jacobian gradient and Hessian", ok,
            "grad rel err %.2e, hess rel err %.2e, singleton log J = 0: %s" % (worst_g, worst_h, singleton_ok))


def check_shortcut(rng, n_instances=30):
    model = LossModel("gaussian")
    worst = 0.
    for _ in range(n_instances):
        ds, groups, penalty, rand, sol = gaussian_instance(rng)
        fit, prob = instance_problem(model, ds, groups, rand, sol)
        A, b, O = shortcut_parameters(prob.H_EE, prob.U_hat, prob.Lambda_E, prob.cond.u, rand.f)
        worst = max(worst, _rel(A, prob.A_bar), _rel(b, prob.b_bar), _rel(O, prob.Omega_bar))
    return ("closed-form vs general conditional parameters", worst < 1e-10, "max rel diff %.2e" % worst)


def check_variance_bound(rng, n_instances=30):
    model = LossModel("gaussian")
    violations = 0
    for _ in range(n_instances):
        ds, groups, penalty, rand, sol = gaussian_instance(rng)
        _, prob = instance_problem(model, ds, groups, rand, sol)
        sel = selective_inference(prob)
        if np.max(np.abs(sel.cov)) > sel.variance_bound * (1 + 1e-10):
            violations += 1
    return ("inverse Fisher entrywise bound", violations == 0, "%d violations" % violations)


def check_scalar_gstar(rng, n_instances=20):
    """One active group of size two: compare Newton to bisection on the stationarity equation."""
    from types import SimpleNamespace
    worst = 0.
    for _ in range(n_instances):
        lam = rng.uniform(0.2, 3.)
        wbar = rng.uniform(0.1, 3.)
        m = rng.uniform(-3., 5.)
        prob = SimpleNamespace(
            barrier_c=0., Omega_bar_inv=np.array([[1 / wbar]]), A_bar=np.zeros((1, 2)),
            b_bar=np.array([m]), gamma_scaled=np.array([1.]), n_groups=1,
            jacobian_offset=np.array([[lam]]), jacobian_blocks=np.array([0]))
        g = solve_gstar(prob, np.zeros(2))[0]

        def eq(x):
            return (x - m) / wbar - 1 / (x + lam) - 1 / (x * (x + 1))
        root = brentq(eq, 1e-12, 1e3, xtol=1e-14, rtol=1e-15)
        worst = max(worst, abs(g - root))
    return ("scalar norm problem vs bisection", worst < 1e-10, "max abs diff %.2e" % worst)


def check_barrier(rng):
    v = rng.uniform(0.1, 4., 5)
    g_err = _rel(grad_barrier(v), _fd_grad(barrier, v))
    h_err = _rel(hess_barrier(v), _fd_jac(grad_barrier, v))
    ok = g_err < 1e-7 and h_err < 1e-7 and abs(barrier(np.ones(3)) - 3 * np.log(2)) < 1e-15
    return ("barrier derivatives", ok, "grad %.2e, hess %.2e" % (g_err, h_err))


def check_penalty(lambda_g):
    try:
        Penalty(lambda_g, n=1)
    except ValueError as exc:
        return ("penalty weights positive", False, str(exc))
    return ("penalty weights positive", True, "ok")


def run_all(seed=0, inject_negative_lambda=False):
    rng = np.random.default_rng(seed)
    lam = np.array([1., 0.5, 2.])
    if inject_negative_lambda:
        lam[1] = -0.5
    return [check_penalty(lam), check_kkt(rng), check_jacobian_chain(rng), check_shortcut(rng),
            check_variance_bound(rng), check_scalar_gstar(rng), check_barrier(rng)]
