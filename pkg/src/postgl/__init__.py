"""Selective inference after the randomized group lasso."""

from .model import (Dataset, GroupStructure, LossModel, MomentMatrices, ModelError,
                    RankDeficiencyError, estimate_moments)
from .glasso import (Penalty, RandomizationSpec, SolverOptions, GroupLassoSolution,
                     default_lambda, draw_randomization, no_randomization, solve_group_lasso)
from .restricted import RestrictedFit, fit_restricted, covariance_blocks, compute_beta_perp
from .selective import (SelectiveProblem, SelectiveFit, EmptySelectionError, build_problem,
                        solve_gstar, selective_mle, observed_fisher, wald_inference)
from .pipeline import post_gl_inference
from .baselines import SplitPlan, data_splitting_inference, naive_inference
from .report import InferenceReport

__all__ = [
    "Dataset", "GroupStructure", "LossModel", "MomentMatrices", "ModelError", "RankDeficiencyError",
    "estimate_moments", "Penalty", "RandomizationSpec", "SolverOptions", "GroupLassoSolution",
    "default_lambda", "draw_randomization", "no_randomization", "solve_group_lasso",
    "RestrictedFit", "fit_restricted", "covariance_blocks", "compute_beta_perp",
    "SelectiveProblem", "SelectiveFit", "EmptySelectionError", "build_problem", "solve_gstar",
    "selective_mle", "observed_fisher", "wald_inference", "post_gl_inference", "SplitPlan",
    "data_splitting_inference", "naive_inference", "InferenceReport",
]
