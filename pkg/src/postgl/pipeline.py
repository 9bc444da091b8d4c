"""End-to-end selective inference after the randomized group lasso."""

from dataclasses import dataclass
import time

import numpy as np

from .glasso import SolverOptions, draw_randomization, solve_group_lasso
from .model import weighted_gram
from .report import build_report, empty_report
from .restricted import restricted_inference_fit
from .selective import build_problem, selective_inference


def pilot_hessian(model, ds):
    """
    ``X^T W X / n`` with weights at the intercept-only mean, times the
    response variance for the Gaussian loss so that the result estimates
    the covariance of the score rather than its curvature.
    """
    ybar = float(np.mean(ds.y))
    if model.kind == "logistic":
        ybar = min(max(ybar, 1e-3), 1 - 1e-3)
    elif model.kind in ("poisson", "quasi_poisson"):
        ybar = max(ybar, 1e-3)
    theta0 = model.link(ybar)
    w = model.d2(np.full(ds.n, theta0))
    H = weighted_gram(ds.X, w) / ds.n
    if model.kind == "gaussian":
        H = H * np.var(ds.y, ddof=1)
    return 0.5 * (H + H.T)


@dataclass
class PostGLResult:
    report: object
    solution: object = None
    fit: object = None
    problem: object = None
    selective: object = None
    randomization: object = None


def post_gl_inference(model, ds, groups, penalty, f=None, alpha=0.1, seed=None, rand=None,
                      barrier_c=0., solver_opts=None):
    """
    Randomized group lasso followed by selective MLE inference.

    Parameters
    ----------
    f : float
        Randomization scale, ``Omega = f * H_pilot``.  Ignored when ``rand``
        is given.
    rand : RandomizationSpec, optional
        A prepared randomization.
    seed : int or Generator
        Seeds the randomization draw.
    """
    t0 = time.perf_counter()
    if rand is None:
        if f is None:
            raise ValueError("either f or rand is required")
        rand = draw_randomization("scaled_H", f, pilot_hessian(model, ds), seed, ds.n)
    sol = solve_group_lasso(model, ds, groups, penalty, rand, solver_opts or SolverOptions())
    t1 = time.perf_counter()
    prov = {"randomization": rand.form, "f": rand.f, "ridge_repaired": rand.repaired,
            "barrier_c": barrier_c, "kkt_residual": sol.kkt_residual}
    if sol.empty:
        rep = empty_report("post_gl", alpha, True, penalty, seed if not hasattr(seed, "integers") else None,
                           {"select": t1 - t0}, prov)
        return PostGLResult(report=rep, solution=sol, randomization=rand)
    Eprime = groups.columns(sol.inactive_groups)
    fit = restricted_inference_fit(model, ds, sol.E, groups, beta0=sol.beta_lasso[sol.E], Eprime=Eprime)
    problem = build_problem(fit, sol, rand, barrier_c=barrier_c)
    sel = selective_inference(problem, alpha)
    bound = sel.variance_bound
    if np.max(np.abs(sel.cov)) > bound * (1 + 1e-8):
        raise ArithmeticError("inverse Fisher information exceeds its entrywise bound")
    t2 = time.perf_counter()
    prov["variance_bound"] = bound
    if np.isfinite(problem.shortcut_error):
        prov["shortcut_error"] = problem.shortcut_error
    rep = build_report("post_gl", ds, groups, sol.E, sol.active_groups, sel.mle, sel.cov, alpha, True,
                       penalty, seed if not hasattr(seed, "integers") else None,
                       {"select": t1 - t0, "infer": t2 - t1}, prov, problem.group_positions)
    return PostGLResult(report=rep, solution=sol, fit=fit, problem=problem, selective=sel,
                        randomization=rand)
