"""
Acceptance suite.  Every criterion runs at its full size and tolerance and
prints one PASS/FAIL line.  The simulation studies take most of the time
(about half an hour on one core); set POSTGL_THREADS to use more workers.
"""

import filecmp
import os
import time
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.optimize import brentq, minimize

from postgl import cli
from postgl.checks import _fd_grad, _fd_jac, _rel, gaussian_instance, instance_problem, random_groups
from postgl.glasso import default_lambda, draw_randomization, solve_group_lasso
from postgl.model import Dataset, LossModel, estimate_moments
from postgl.selective import (brute_force_loglik, grad_log_jacobian, hess_log_jacobian, log_jacobian,
                              observed_fisher, pi_map, selective_inference, selective_mle,
                              shortcut_parameters, solve_gstar)
from postgl.simulation import SimConfig, run_study

pytestmark = pytest.mark.acceptance

GAUSS = LossModel("gaussian")

# inverse-Fisher bound bookkeeping shared by every suite
BOUND = {"checked": 0, "violations": 0, "suites": []}


@pytest.fixture
def report(capsys):
    def _report(k, ok, detail):
        with capsys.disabled():
            print("\nCRITERION %d: %s  %s" % (k, "PASS" if ok else "FAIL", detail), flush=True)
    return _report


def _record_bound(prob, suite):
    sel = selective_inference(prob)
    BOUND["checked"] += 1
    if np.max(np.abs(sel.cov)) > sel.variance_bound * (1 + 1e-10):
        BOUND["violations"] += 1
    if suite not in BOUND["suites"]:
        BOUND["suites"].append(suite)
    return sel


def _record_study_bounds(results, suite):
    for res in results:
        for r in res.records:
            if r["method"] != "post_gl":
                continue
            if r["status"] == "ok":
                BOUND["checked"] += 1
            elif "entrywise bound" in r["error"]:
                BOUND["violations"] += 1
    BOUND["suites"].append(suite)


def _bundled(name, **overrides):
    d = cli.load_json(cli.resolve_config_path(name))
    d.update(overrides)
    return SimConfig.from_dict(d)


def _fmt(a, keys=("coverage", "median_rep_coverage", "mean_length", "f1", "n_failed")):
    return "/".join("%.3f" % a[k] if isinstance(a[k], float) else str(a[k]) for k in keys)


def test_criterion_1_toy_design(report):
    ok_all, lines = True, []
    results = []
    for n in (200, 350, 500):
        res = run_study(_bundled("table1_n%d.json" % n))
        results.append(res)
        a = res.aggregates()
        post, split, naive = a["post_gl"], a["split"], a["naive"]
        ratio = split["mean_length"] / post["mean_length"]
        checks = {
            "post coverage": abs(post["coverage"] - 0.9) <= 0.03,
            "naive coverage": naive["coverage"] <= 0.82,
            "shorter than split": post["mean_length"] < split["mean_length"],
            "F1 vs split": abs(post["f1"] - split["f1"]) <= 0.05,
        }
        if n == 200:
            checks["length ratio >= 2"] = ratio >= 2
        failed = [k for k, v in checks.items() if not v]
        ok_all &= not failed
        lines.append("n=%d post cov %.3f naive cov %.3f split cov %.3f | length post %.3f split %.3f "
                     "(ratio %.2f) | F1 post %.3f split %.3f%s"
                     % (n, post["coverage"], naive["coverage"], split["coverage"], post["mean_length"],
                        split["mean_length"], ratio, post["f1"], split["f1"],
                        " | failed: " + ", ".join(failed) if failed else ""))
    _record_study_bounds(results, "toy design")
    report(1, ok_all, "\n  " + "\n  ".join(lines))
    assert ok_all, lines


def test_criterion_2_simulation_study(report):
    lines, ok_cov, ok_naive, shorter = [], True, True, 0
    results = []
    cells = [(resp, s) for resp in ("gaussian", "logistic", "poisson", "negbin") for s in (5, 8, 10)]
    for resp, s in cells:
        t0 = time.perf_counter()
        res = run_study(_bundled("study_%s_s%d.json" % (resp, s)))
        results.append(res)
        a = res.aggregates()
        post, split, naive = a["post_gl"], a["split"], a["naive"]
        c_ok = abs(post["coverage"] - 0.9) <= 0.04
        n_ok = naive["median_rep_coverage"] < 0.88
        ok_cov &= c_ok
        ok_naive &= n_ok
        shorter += post["mean_length"] <= split["mean_length"]
        lines.append("%-8s s=%-2d post %s | split %s | naive %s  [%.0fs]%s"
                     % (resp, s, _fmt(post), _fmt(split), _fmt(naive), time.perf_counter() - t0,
                        "" if c_ok and n_ok else "  <- out of tolerance"))
    frac = shorter / len(cells)
    ok = ok_cov and ok_naive and frac >= 0.9
    _record_study_bounds(results, "simulation study")
    report(2, ok, "(coverage/median coverage/length/F1/failures)\n  " + "\n  ".join(lines)
           + "\n  Post-GL no longer than splitting in %d/%d cells" % (shorter, len(cells)))
    assert ok, lines


def test_criterion_3_kkt_suite(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = [0., 0., 0.]
    probs = []
    for _ in range(1000):
        ds, groups, pen, rand, sol = gaussian_instance(rng)
        worst[0] = max(worst[0], sol.kkt_residual)
        worst[1] = max(worst[1], sol.max_z_norm - 1)
        _, prob = instance_problem(GAUSS, ds, groups, rand, sol)
        rec = pi_map(prob, prob.beta_E_scaled, np.sqrt(ds.n) * prob.cond.beta_perp, prob.gamma_scaled,
                     prob.cond.u, prob.cond.z)
        worst[2] = max(worst[2], _rel(rec, rand.sqrt_n_omega))
        probs.append(prob)
    elapsed = time.perf_counter() - t0
    for prob in probs:
        _record_bound(prob, "KKT suite")
    ok = worst[0] < 1e-6 and worst[1] <= 1e-8 and worst[2] < 1e-8 and elapsed < 60
    report(3, ok, "stationarity %.2e, max ||z||-1 %.2e, reconstruction rel %.2e, %.1fs"
           % (worst[0], worst[1], worst[2], elapsed))
    assert ok


def test_criterion_4_jacobian_chain(report):
    rng = np.random.default_rng(4)
    worst_g = worst_h = 0.
    singleton_ok = True
    n_mixed = 0
    for _ in range(200):
        while True:
            ds, groups, pen, rand, sol = gaussian_instance(rng, base_lambda=0.15)
            if any(u.size > 1 for u in sol.u):
                break
        n_mixed += 1
        _, prob = instance_problem(GAUSS, ds, groups, rand, sol)
        g = rng.uniform(0.5, 5., prob.n_groups)
        worst_g = max(worst_g, _rel(grad_log_jacobian(prob, g), _fd_grad(lambda x: log_jacobian(prob, x), g)))
        worst_h = max(worst_h, _rel(hess_log_jacobian(prob, g),
                                    _fd_jac(lambda x: grad_log_jacobian(prob, x), g)))
        _record_bound(prob, "Jacobian chain")
        ds, groups, pen, rand, sol = gaussian_instance(rng, max_size=1)
        _, prob = instance_problem(GAUSS, ds, groups, rand, sol)
        singleton_ok &= log_jacobian(prob, rng.uniform(0.5, 5., prob.n_groups)) == 0.
        _record_bound(prob, "Jacobian chain")
    ok = worst_g < 1e-5 and worst_h < 1e-5 and singleton_ok
    report(4, ok, "%d instances with a multi-column active group: grad rel %.2e, hess rel %.2e; "
           "singleton log J == 0: %s" % (n_mixed, worst_g, worst_h, singleton_ok))
    assert ok


def _fd_hessian(fun, x, h):
    k = x.size
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            ei, ej = np.zeros(k), np.zeros(k)
            ei[i], ej[j] = h[i], h[j]
            out[i, j] = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) \
                / (4 * h[i] * h[j])
    return out


def _logistic_problem(rng):
    model = LossModel("logistic")
    n, p = 300, 6
    while True:
        X = rng.standard_normal((n, p))
        y = (rng.random(n) < 1 / (1 + np.exp(-(0.8 * X[:, 0] - 0.6 * X[:, 1])))).astype(float)
        ds = Dataset(y, X)
        groups = random_groups(rng, p, 3)
        H = estimate_moments(model, ds, np.zeros(0), np.zeros(0, int)).H
        rand = draw_randomization("scaled_H", 1., H, rng, n)
        sol = solve_group_lasso(model, ds, groups, default_lambda(ds, groups, 0.25), rand)
        if not sol.empty and sol.E.size <= 3:
            return instance_problem(model, ds, groups, rand, sol)[1]


def test_criterion_5_mle_and_fisher_oracles(report):
    rng = np.random.default_rng(5)
    worst_mle = worst_fisher = 0.
    for k in range(50):
        if k % 5 == 4:
            prob = _logistic_problem(rng)
        else:
            while True:
                ds, groups, pen, rand, sol = gaussian_instance(rng)
                if sol.E.size <= 3:
                    break
            prob = instance_problem(GAUSS, ds, groups, rand, sol)[1]
        mle = selective_mle(prob)
        fisher = observed_fisher(prob)
        se = np.sqrt(np.diag(np.linalg.inv(fisher)))
        negll = lambda b: -brute_force_loglik(prob, bstar=b)
        ref = minimize(negll, mle + 0.5 * se * rng.standard_normal(mle.size), method="BFGS",
                       options={"gtol": 1e-10, "xrtol": 1e-12})
        ref = minimize(negll, ref.x, method="Nelder-Mead",
                       options={"xatol": 1e-9 * se.min(), "fatol": 1e-14, "maxiter": 20000})
        worst_mle = max(worst_mle, np.max(np.abs(ref.x - mle)))
        H_fd = _fd_hessian(negll, mle, 1e-3 * se)
        worst_fisher = max(worst_fisher, np.max(np.abs(H_fd - fisher)) / np.max(np.abs(fisher)))
        _record_bound(prob, "MLE/Fisher oracle")
    worst_g = 0.
    for _ in range(50):
        lam, wbar, m = rng.uniform(0.2, 3.), rng.uniform(0.1, 3.), rng.uniform(-3., 5.)
        prob = SimpleNamespace(barrier_c=0., Omega_bar_inv=np.array([[1 / wbar]]), A_bar=np.zeros((1, 2)),
                               b_bar=np.array([m]), gamma_scaled=np.array([1.]), n_groups=1,
                               jacobian_offset=np.array([[lam]]), jacobian_blocks=np.array([0]))
        g = solve_gstar(prob, np.zeros(2))[0]
        root = brentq(lambda x: (x - m) / wbar - 1 / (x + lam) - 1 / (x * (x + 1)), 1e-12, 1e3,
                      xtol=1e-14, rtol=1e-15)
        worst_g = max(worst_g, abs(g - root))
    ok = worst_mle < 1e-4 and worst_fisher < 1e-3 and worst_g < 1e-10
    report(5, ok, "MLE max abs diff %.2e, Fisher rel diff %.2e, scalar g* vs bisection %.2e"
           % (worst_mle, worst_fisher, worst_g))
    assert ok


def test_criterion_7_shortcut_equivalence(report):
    rng = np.random.default_rng(7)
    worst = 0.
    for _ in range(100):
        ds, groups, pen, rand, sol = gaussian_instance(rng)
        _, prob = instance_problem(GAUSS, ds, groups, rand, sol)
        A, b, O = shortcut_parameters(prob.H_EE, prob.U_hat, prob.Lambda_E, prob.cond.u, rand.f)
        worst = max(worst, _rel(A, prob.A_bar), _rel(b, prob.b_bar), _rel(O, prob.Omega_bar))
        _record_bound(prob, "shortcut equivalence")
    ok = worst < 1e-10
    report(7, ok, "max rel diff %.2e over 100 instances" % worst)
    assert ok


def test_criterion_6_variance_bound(report):
    # runs after the suites above and counts every selective fit they produced
    ok = BOUND["checked"] > 0 and BOUND["violations"] == 0
    report(6, ok, "%d selective fits checked (%s), %d violations"
           % (BOUND["checked"], ", ".join(BOUND["suites"]), BOUND["violations"]))
    assert ok


def test_criterion_8_determinism(report, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / ("run%d" % k)
        assert cli.main(["simulate", "table1_n200.json", "--reps", "40", "--out", str(out)]) == 0
        outs.append(out / "records.csv")
    same = filecmp.cmp(outs[0], outs[1], shallow=False)
    report(8, same, "records.csv byte-identical across two runs: %s (%d bytes)"
           % (same, os.path.getsize(outs[0])))
    assert same
