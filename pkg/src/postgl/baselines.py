"""Data splitting and naive inference, for comparison."""

from dataclasses import dataclass
import time

import numpy as np

from .glasso import SolverOptions, no_randomization, solve_group_lasso
from .report import build_report, empty_report, group_positions_for
from .restricted import restricted_inference_fit


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint selection / inference row sets, ``round(r n)`` rows for selection."""
    r: float
    selection_rows: np.ndarray
    inference_rows: np.ndarray
    seed: object = None

    @classmethod
    def draw(cls, n, r, seed=None):
        if not 0 < r < 1:
            raise ValueError("split fraction must lie in (0, 1), got %r" % r)
        n1 = int(round(r * n))
        if n1 >= n or n1 < 1:
            raise ValueError("split of %d rows at r=%g leaves an empty subset" % (n, r))
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        perm = rng.permutation(n)
        return cls(r=float(r), selection_rows=np.sort(perm[:n1]), inference_rows=np.sort(perm[n1:]),
                   seed=None if isinstance(seed, np.random.Generator) else seed)


def _classical(method, model, ds_sel, ds_inf, groups, penalty_sel, penalty, alpha, valid, seed,
               opts, prov):
    t0 = time.perf_counter()
    sol = solve_group_lasso(model, ds_sel, groups, penalty_sel, no_randomization(ds_sel.p, ds_sel.n),
                            opts or SolverOptions())
    t1 = time.perf_counter()
    if sol.empty:
        return empty_report(method, alpha, valid, penalty, seed, {"select": t1 - t0}, prov), sol, None
    Eprime = groups.columns(sol.inactive_groups)
    fit = restricted_inference_fit(model, ds_inf, sol.E, groups, Eprime=Eprime)
    cov = fit.Sigma_E / ds_inf.n
    rep = build_report(method, ds_inf, groups, sol.E, sol.active_groups, fit.beta_E, cov, alpha, valid,
                       penalty, seed, {"select": t1 - t0, "infer": time.perf_counter() - t1}, prov,
                       group_positions_for(groups, sol.active_groups))
    return rep, sol, fit


def data_splitting_inference(model, ds, groups, penalty, plan, alpha=0.1, solver_opts=None,
                             return_details=False):
    """
    Unrandomized group lasso on the selection rows with weights
    ``sqrt(r) lambda_g``, then a refit and sandwich Wald inference on the
    held-out rows only.
    """
    ds_sel = ds.subset(plan.selection_rows)
    ds_inf = ds.subset(plan.inference_rows)
    pen_sel = penalty.scaled(np.sqrt(plan.r))
    prov = {"split_r": plan.r, "n_select": ds_sel.n, "n_infer": ds_inf.n}
    out = _classical("split", model, ds_sel, ds_inf, groups, pen_sel, penalty, alpha, True, plan.seed,
                     solver_opts, prov)
    return out if return_details else out[0]


def naive_inference(model, ds, groups, penalty, alpha=0.1, solver_opts=None, return_details=False):
    """
    Unrandomized group lasso and refit on the same data, with classical Wald
    output.  Not valid after selection; flagged as such in the report.
    """
    prov = {"note": "ignores selection; intervals are not selection-valid"}
    out = _classical("naive", model, ds, ds, groups, penalty, penalty, alpha, False, None,
                     solver_opts, prov)
    return out if return_details else out[0]
