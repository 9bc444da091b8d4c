"""
Unpenalized refit on the selected columns and the statistics conditioned on
downstream.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import (RankDeficiencyError, check_pd, estimate_moments, gradient,
                    loss_value)


class SeparationError(ArithmeticError):
    """Coefficients diverge (complete or quasi-complete separation)."""


class RefitConvergenceError(RuntimeError):
    pass


@dataclass
class RestrictedFit:
    """
    Refit on ``E`` and the derived blocks.

    ``Sigma_E`` is the asymptotic covariance of ``sqrt(n) beta_E``;
    ``Sigma_E / n`` is the usual sandwich covariance of the estimate.
    """
    beta_E: np.ndarray
    E: np.ndarray
    Eprime: np.ndarray
    moments: object = None
    beta_perp: np.ndarray = None
    Sigma_E: np.ndarray = None
    Sigma_perp: np.ndarray = None
    A_E: np.ndarray = None
    grad_norm: float = np.nan
    iterations: int = 0


def _collinear_columns(X_E, E):
    q, r = np.linalg.qr(X_E)
    d = np.abs(np.diag(r))
    tol = d.max() * max(X_E.shape) * np.finfo(float).eps * 10 if d.size else 0
    return [int(E[j]) for j in np.flatnonzero(d <= tol)]


def fit_restricted(model, ds, E, beta0=None, tol=1e-10, max_iter=100, max_halvings=50,
                   separation_bound=1e4):
    """
    M-estimator on the columns ``E`` by damped Newton.

    Stops when the max-norm of ``X_E^T grad l / sqrt(n)`` is below ``tol``
    (relative to the scale of the score at zero when that exceeds one).

    Raises
    ------
    RankDeficiencyError
        ``X_E`` does not have full column rank.
    SeparationError
        The coefficient norm passes ``separation_bound``.
    """
    E = np.asarray(E, dtype=int)
    if E.size == 0:
        raise ValueError("empty selection")
    X_E = ds.X[:, E]
    if np.linalg.matrix_rank(X_E) < E.size:
        bad = _collinear_columns(X_E, E)
        raise RankDeficiencyError("X_E is rank deficient; collinear columns %s" % bad)
    sqn = np.sqrt(ds.n)
    beta = np.zeros(E.size) if beta0 is None else np.asarray(beta0, float).copy()
    y = ds.y

    def loss(b):
        return float(np.sum(model.rho(X_E @ b, y)))

    scale = max(1., np.max(np.abs(X_E.T @ model.d1(np.zeros(ds.n), y))) / sqn)
    thresh = tol * scale
    f = loss(beta)
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        eta = X_E @ beta
        score = X_E.T @ model.d1(eta, y)
        gnorm = np.max(np.abs(score)) / sqn
        if gnorm < thresh:
            break
        w = model.d2(eta, y)
        hess = (X_E * w[:, None]).T @ X_E
        try:
            step = cho_solve(cho_factor(hess), score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        s = 1.
        for _ in range(max_halvings):
            cand = beta - s * step
            try:
                fc = loss(cand)
            except ArithmeticError:
                fc = np.inf
            if fc <= f + 1e-12 * abs(f):
                break
            s *= 0.5
        else:
            raise RefitConvergenceError("step halving failed at iteration %d (score %.3g)"
                                        % (it, gnorm))
        beta, f = cand, fc
        if np.linalg.norm(beta) > separation_bound:
            raise SeparationError("coefficients diverge (norm %.3g): separation" % np.linalg.norm(beta))
    else:
        eta = X_E @ beta
        gnorm = np.max(np.abs(X_E.T @ model.d1(eta, y))) / sqn
        if gnorm > 1e3 * thresh:
            raise RefitConvergenceError("Newton refit did not converge (score %.3g)" % gnorm)
    if model.kind == "logistic":
        # complete separation can meet the score tolerance before the norm
        # guard; the information then collapses
        w = model.d2(X_E @ beta, y)
        info = np.linalg.eigvalsh((X_E * w[:, None]).T @ X_E)[0]
        if info < 1e-8 * 0.25 * np.linalg.eigvalsh(X_E.T @ X_E)[0]:
            raise SeparationError("fitted probabilities are numerically 0 or 1 (norm %.3g): separation"
                                  % np.linalg.norm(beta))
    mask = np.ones(ds.p, bool)
    mask[E] = False
    return RestrictedFit(beta_E=beta, E=E, Eprime=np.flatnonzero(mask), grad_norm=float(gnorm),
                         iterations=it)


def covariance_blocks(moments, E=None):
    """
    ``Sigma_E = H_EE^-1 K_EE H_EE^-1``,
    ``Sigma_perp = K_E'E' - K_E'E K_EE^-1 K_EE'`` and
    ``A_E = H_E'E - K_E'E K_EE^-1 H_EE``, all through Cholesky solves.

    When ``K`` is exactly ``dispersion * H`` the identities ``A_E = 0`` and
    ``Sigma_E = dispersion * H_EE^-1`` are used instead of the cancellation.
    """
    if E is not None and not np.array_equal(np.asarray(E, dtype=int), moments.E):
        raise ValueError("E does not match the moments")
    H_EE = moments.H_EE
    K_EE = moments.K_EE
    k = H_EE.shape[0]
    cH = (check_pd(H_EE, "H_{E,E}", columns=moments.E), True)
    cK = (check_pd(K_EE, "K_{E,E}", columns=moments.E), True)
    K_EpE = moments.K_EpE
    if is_proportional(moments):
        Sigma_E = moments.dispersion * cho_solve(cH, np.identity(k))
        A_E = np.zeros((moments.Eprime.size, k))
    else:
        HinvK = cho_solve(cH, K_EE)
        Sigma_E = cho_solve(cH, HinvK.T)
        A_E = moments.H_EpE - K_EpE @ cho_solve(cK, H_EE)
    Sigma_E = 0.5 * (Sigma_E + Sigma_E.T)
    Sigma_perp = moments.K_EpEp - K_EpE @ cho_solve(cK, K_EpE.T)
    Sigma_perp = 0.5 * (Sigma_perp + Sigma_perp.T)
    return Sigma_E, Sigma_perp, A_E


def is_proportional(moments):
    """Whether ``K`` is exactly ``dispersion * H``."""
    return bool(np.array_equal(moments.K, moments.dispersion * moments.H))


def compute_beta_perp(model, ds, fit, E=None):
    """``X_E'^T grad l(X_E beta_E) / n - A_E beta_E``."""
    E = fit.E if E is None else np.asarray(E, dtype=int)
    grad = gradient(model, ds, fit.beta_E, E)
    return grad[fit.Eprime] / ds.n - fit.A_E @ fit.beta_E


def restricted_inference_fit(model, ds, E, groups=None, beta0=None, Eprime=None):
    """Refit, moments at the refit, covariance blocks and ``beta_perp``."""
    fit = fit_restricted(model, ds, E, beta0=beta0)
    if Eprime is not None:
        fit.Eprime = np.asarray(Eprime, dtype=int)
    fit.moments = estimate_moments(model, ds, fit.beta_E, fit.E, groups=groups, Eprime=fit.Eprime)
    fit.Sigma_E, fit.Sigma_perp, fit.A_E = covariance_blocks(fit.moments)
    fit.beta_perp = compute_beta_perp(model, ds, fit)
    return fit


def loss_at(model, ds, fit):
    beta = np.zeros(ds.p)
    beta[fit.E] = fit.beta_E
    return loss_value(model, ds, beta)
