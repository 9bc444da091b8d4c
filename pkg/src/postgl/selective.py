"""
Conditional likelihood after randomized group-lasso selection.

Coordinates are permuted so that the selected columns ``E`` come first,
followed by the inactive columns ``E'`` in group order.  With
``k = |E|`` and ``G`` active groups the map from the refit statistics and
the selection triple to the randomization is::

    sqrt(n) omega = A_cal b + B_cal bd(u) g + C_cal (Lambda_E' z + b_perp) + D_cal u

which is linear in ``(b, g)`` once ``u``, ``z`` and ``b_perp`` are held
fixed.  Everything below works with the resulting Gaussian model for
``(sqrt(n) beta_E, sqrt(n) gamma)`` and the Jacobian of the map.

The Jacobian determinant carries a constant factor depending only on the
conditioning data; it is dropped, as is the likelihood normalizer in the
target.  Neither depends on ``(b, g)`` in the terms used for inference.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.stats import chi2, multivariate_normal, norm

from .restricted import is_proportional

logger = logging.getLogger(__name__)


class EmptySelectionError(ValueError):
    """Nothing was selected, so there is nothing to infer about."""


class ConditioningError(LinAlgError):
    """A matrix of the conditional model is not positive definite."""


class GStarConvergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        self.trace = trace or []
        super().__init__(message)


class InfeasibleError(ArithmeticError):
    """Evaluation outside the open domain of the barrier or the Jacobian."""


def _readonly(*arrays):
    for a in arrays:
        if isinstance(a, np.ndarray):
            a.setflags(write=False)


def _chol(M, name):
    try:
        return cho_factor(M, lower=True)
    except LinAlgError:
        ev = np.linalg.eigvalsh(0.5 * (M + M.T))
        raise ConditioningError("%s is not positive definite (eigenvalues in [%.3g, %.3g])"
                                % (name, ev[0], ev[-1])) from None


def _sym(M):
    return 0.5 * (M + M.T)


def _inv_pd(M, name):
    c = _chol(M, name)
    return _sym(cho_solve(c, np.identity(M.shape[0])))


def orthogonal_completion(u):
    """
    Orthonormal basis of the tangent space of the sphere at the unit vector
    ``u``, as a ``len(u) x (len(u) - 1)`` matrix.
    """
    u = np.asarray(u, dtype=float)
    d = u.size
    basis = []
    # Gram-Schmidt of the coordinate axes against u, taking the axes least
    # aligned with u first for stability
    for j in np.argsort(np.abs(u)):
        if len(basis) == d - 1:
            break
        v = np.zeros(d)
        v[j] = 1.
        for _ in range(2):
            v -= (u @ v) * u
            for b in basis:
                v -= (b @ v) * b
        nrm = np.linalg.norm(v)
        if nrm > 1e-8:
            basis.append(v / nrm)
    return np.column_stack(basis) if basis else np.zeros((d, 0))


def block_diag_columns(vectors):
    """``bd(u)``: one column per vector, stacked down the diagonal."""
    sizes = [v.size for v in vectors]
    out = np.zeros((sum(sizes), len(vectors)))
    start = 0
    for k, v in enumerate(vectors):
        out[start:start + v.size, k] = v
        start += v.size
    return out


@dataclass(frozen=True)
class Conditioning:
    """Frozen selection data: active directions, inactive subgradients and ``beta_perp``."""
    u: np.ndarray
    z: np.ndarray
    beta_perp: np.ndarray


@dataclass(frozen=True)
class SelectiveProblem:
    """
    Every matrix of the conditional model, built once from a refit, a
    group-lasso solution and the randomization used to produce it.

    Matrices are in the permuted coordinates ``(E, E')``.  ``Lambda_E`` and
    ``Lambda_Eprime`` are stored as diagonals.  ``jacobian_offset`` is
    ``U_bar^T H_EE^-1 Lambda_E U_bar`` and ``jacobian_blocks[i]`` is the
    active group owning column ``i`` of ``U_bar``.
    """
    n: int
    E: np.ndarray
    Eprime: np.ndarray
    active_groups: np.ndarray
    group_positions: list
    Lambda_E: np.ndarray
    Lambda_Eprime: np.ndarray
    A_cal: np.ndarray
    B_cal: np.ndarray
    C_cal: np.ndarray
    D_cal: np.ndarray
    U_hat: np.ndarray
    U_bar: np.ndarray
    Omega: np.ndarray
    A_bar: np.ndarray
    b_bar: np.ndarray
    Omega_bar: np.ndarray
    Theta_bar: np.ndarray
    R_bar: np.ndarray
    s_bar: np.ndarray
    Sigma_E: np.ndarray
    H_EE: np.ndarray
    cond: Conditioning
    barrier_c: float
    beta_E_scaled: np.ndarray
    gamma_scaled: np.ndarray
    jacobian_offset: np.ndarray
    jacobian_blocks: np.ndarray
    Omega_bar_inv: np.ndarray
    Theta_bar_inv: np.ndarray
    Sigma_E_inv: np.ndarray
    AOA_cal: np.ndarray
    c0: np.ndarray
    shortcut_error: float = np.nan
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def n_groups(self):
        return self.active_groups.size

    @property
    def perm(self):
        return np.concatenate([self.E, self.Eprime])


def shortcut_parameters(H_EE, U_hat, lambda_E, u, f):
    """
    ``(A_bar, b_bar, Omega_bar)`` when ``Omega = f H`` with the same ``H``
    that enters the map.
    """
    HU = H_EE @ U_hat
    UHU = U_hat.T @ HU
    c = _chol(UHU, "U^T H_EE U")
    Omega_bar = f * _sym(cho_solve(c, np.identity(UHU.shape[0])))
    A_bar = cho_solve(c, HU.T)
    b_bar = -cho_solve(c, U_hat.T @ (lambda_E * u))
    return A_bar, b_bar, Omega_bar


def build_problem(fit, sol, rand, barrier_c=0., check_shortcut=True):
    """
    Construct the conditional model.

    Parameters
    ----------
    fit : RestrictedFit
        Refit with moments, covariance blocks and ``beta_perp``.  Its
        ``Eprime`` must list the inactive columns in group order.
    sol : GroupLassoSolution
    rand : RandomizationSpec
        The randomization that was used in the solve.
    barrier_c : float
        Lower end of the barrier domain for ``sqrt(n) gamma``.
    check_shortcut : bool
        When ``rand.Omega`` is exactly ``f`` times the refit ``H``,
        compare the closed-form parameters to the general construction.
    """
    if sol.empty:
        raise EmptySelectionError("no group was selected")
    n = rand.n
    sqn = np.sqrt(n)
    m = fit.moments
    E = np.asarray(sol.E, dtype=int)
    if not np.array_equal(E, fit.E):
        raise ValueError("refit columns do not match the selected columns")
    Eprime = fit.Eprime
    k = E.size
    p = k + Eprime.size
    perm = np.concatenate([E, Eprime])

    lam = sol.penalty.lambda_g
    u_list = [np.asarray(v, dtype=float) for v in sol.u]
    u = np.concatenate(u_list)
    sizes = np.array([v.size for v in u_list])
    lambda_E = np.repeat(lam[sol.active_groups], sizes)
    inactive = sol.inactive_groups
    z = sol.z_vector(None)
    if z.size != Eprime.size:
        raise ValueError("inactive subgradient length %d does not match |E'|=%d" % (z.size, Eprime.size))
    z_sizes = np.array([sol.z[g].size for g in inactive], dtype=int)
    lambda_Ep = np.repeat(lam[inactive], z_sizes) if inactive.size else np.zeros(0)
    group_positions = np.split(np.arange(k), np.cumsum(sizes)[:-1])

    H = m.H[np.ix_(perm, perm)]
    K = m.K[np.ix_(perm, perm)]
    H_EE = H[:k, :k]
    K_E = K[:, :k]
    cK = _chol(K[:k, :k], "K_EE")
    if is_proportional(m):
        # K_E K_EE^-1 = H_E H_EE^-1 when K is a multiple of H
        A_cal = -H[:, :k].copy()
    else:
        A_cal = -K_E @ cho_solve(cK, H_EE)
    B_cal = H[:, :k].copy()
    C_cal = np.vstack([np.zeros((k, p - k)), np.identity(p - k)])
    D_cal = np.vstack([np.diag(lambda_E), np.zeros((p - k, k))])

    U_hat = block_diag_columns(u_list)
    comps = [orthogonal_completion(v) for v in u_list]
    ncomp = k - len(u_list)
    U_bar = np.zeros((k, ncomp))
    blocks = np.empty(ncomp, dtype=int)
    col = 0
    for i, (pos, Q) in enumerate(zip(group_positions, comps)):
        U_bar[pos, col:col + Q.shape[1]] = Q
        blocks[col:col + Q.shape[1]] = i
        col += Q.shape[1]

    Omega = _sym(np.asarray(rand.Omega, dtype=float)[np.ix_(perm, perm)])
    cO = _chol(Omega, "Omega")
    beta_perp = np.asarray(fit.beta_perp, dtype=float)
    c0 = C_cal @ (lambda_Ep * z + sqn * beta_perp) + D_cal @ u

    BU = B_cal @ U_hat
    Oi_BU = cho_solve(cO, BU)
    Oi_A = cho_solve(cO, A_cal)
    Oi_c0 = cho_solve(cO, c0)
    Omega_bar_inv = _sym(BU.T @ Oi_BU)
    Omega_bar = _inv_pd(Omega_bar_inv, "Omega_bar^-1")
    A_bar = -Omega_bar @ (BU.T @ Oi_A)
    b_bar = -Omega_bar @ (BU.T @ Oi_c0)

    Sigma_E = _sym(fit.Sigma_E)
    Sigma_E_inv = _inv_pd(Sigma_E, "Sigma_E")
    AOA_cal = _sym(A_cal.T @ Oi_A)
    Theta_bar_inv = _sym(Sigma_E_inv - A_bar.T @ Omega_bar_inv @ A_bar + AOA_cal)
    Theta_bar = _inv_pd(Theta_bar_inv, "Theta_bar^-1")
    R_bar = Theta_bar @ Sigma_E_inv
    s_bar = Theta_bar @ (A_bar.T @ Omega_bar_inv @ b_bar - A_cal.T @ Oi_c0)

    shortcut_error = np.nan
    if check_shortcut and rand.f > 0 and np.array_equal(rand.Omega, rand.f * m.H):
        As, bs, Os = shortcut_parameters(H_EE, U_hat, lambda_E, u, rand.f)
        scale = max(1., np.max(np.abs(A_bar)), np.max(np.abs(b_bar)), np.max(np.abs(Omega_bar)))
        shortcut_error = max(np.max(np.abs(As - A_bar)), np.max(np.abs(bs - b_bar)),
                             np.max(np.abs(Os - Omega_bar))) / scale
        assert shortcut_error < 1e-8, "closed-form and general conditional parameters differ by %.3g" \
            % shortcut_error

    cH = _chol(H_EE, "H_EE")
    jac = U_bar.T @ cho_solve(cH, lambda_E[:, None] * U_bar)

    beta_E_scaled = sqn * np.asarray(fit.beta_E, dtype=float)
    gamma_scaled = sqn * np.asarray(sol.gamma, dtype=float)
    arrays = (u, z, beta_perp, lambda_E, lambda_Ep, A_cal, B_cal, C_cal, D_cal, U_hat, U_bar, Omega,
              A_bar, b_bar, Omega_bar, Theta_bar, R_bar, s_bar, Sigma_E, H_EE, beta_E_scaled,
              gamma_scaled, jac, blocks, Omega_bar_inv, Theta_bar_inv, Sigma_E_inv, AOA_cal, c0)
    _readonly(*arrays)
    return SelectiveProblem(
        n=n, E=E, Eprime=Eprime, active_groups=np.asarray(sol.active_groups),
        group_positions=group_positions, Lambda_E=lambda_E, Lambda_Eprime=lambda_Ep,
        A_cal=A_cal, B_cal=B_cal, C_cal=C_cal, D_cal=D_cal, U_hat=U_hat, U_bar=U_bar,
        Omega=Omega, A_bar=A_bar, b_bar=b_bar, Omega_bar=Omega_bar, Theta_bar=Theta_bar,
        R_bar=R_bar, s_bar=s_bar, Sigma_E=Sigma_E, H_EE=H_EE,
        cond=Conditioning(u=u, z=z, beta_perp=beta_perp), barrier_c=float(barrier_c),
        beta_E_scaled=beta_E_scaled, gamma_scaled=gamma_scaled, jacobian_offset=jac,
        jacobian_blocks=blocks, Omega_bar_inv=Omega_bar_inv, Theta_bar_inv=Theta_bar_inv,
        Sigma_E_inv=Sigma_E_inv, AOA_cal=AOA_cal, c0=c0, shortcut_error=shortcut_error)


def pi_map(problem, b, b_perp, g, u, z):
    """
    The randomization implied by ``(b, b_perp, g, u, z)``, returned in the
    original column order.  Arguments are on the ``sqrt(n)`` scale.
    """
    u_list = [np.asarray(u)[pos] for pos in problem.group_positions]
    val = (problem.A_cal @ b + problem.B_cal @ (block_diag_columns(u_list) @ g)
           + problem.C_cal @ (problem.Lambda_Eprime * z + b_perp) + problem.D_cal @ u)
    out = np.empty_like(val)
    out[problem.perm] = val
    return out


# Jacobian of the map in the active norms

def _jacobian_matrix(problem, g):
    g = np.asarray(g, dtype=float)
    if g.shape != (problem.n_groups,):
        raise ValueError("expected %d group norms, got shape %s" % (problem.n_groups, g.shape))
    return problem.jacobian_offset + np.diag(g[problem.jacobian_blocks])


def _jacobian_inverse(problem, g):
    Mx = _jacobian_matrix(problem, g)
    if Mx.shape[0] == 0:
        return Mx
    try:
        return np.linalg.inv(Mx)
    except LinAlgError:
        raise InfeasibleError("Jacobian matrix is singular") from None


def log_jacobian(problem, g):
    """``log det(Gamma(g) + U_bar^T H_EE^-1 Lambda_E U_bar)``; zero for singleton groups."""
    Mx = _jacobian_matrix(problem, g)
    if Mx.shape[0] == 0:
        return 0.
    sign, logdet = np.linalg.slogdet(Mx)
    if sign <= 0:
        raise InfeasibleError("Jacobian determinant is not positive")
    return float(logdet)


def grad_log_jacobian(problem, g):
    """Per-group sums of the diagonal of the inverse Jacobian matrix."""
    Minv = _jacobian_inverse(problem, g)
    return np.bincount(problem.jacobian_blocks, weights=np.diag(Minv),
                       minlength=problem.n_groups).astype(float)


def hess_log_jacobian(problem, g):
    """
    ``-sum_{i in M_g} sum_{j in M_g'} [M^-1]_ij [M^-1]_ji`` for each pair of
    active groups.
    """
    Minv = _jacobian_inverse(problem, g)
    G = problem.n_groups
    if Minv.shape[0] == 0:
        return np.zeros((G, G))
    ind = np.zeros((Minv.shape[0], G))
    ind[np.arange(Minv.shape[0]), problem.jacobian_blocks] = 1.
    return _sym(-ind.T @ (Minv * Minv.T) @ ind)


# Barrier for the constraint g > c

def _shift(g, c):
    v = np.asarray(g, dtype=float) - c
    if np.any(~(v > 0)):
        raise InfeasibleError("barrier evaluated at g <= c (min g - c = %.3g)" % np.min(v))
    return v


def barrier(g, c=0.):
    v = _shift(g, c)
    return float(np.sum(np.log1p(1. / v)))


def grad_barrier(g, c=0.):
    v = _shift(g, c)
    return -1. / (v * (v + 1))


def hess_barrier(g, c=0.):
    v = _shift(g, c)
    return np.diag((2 * v + 1) / (v ** 2 * (v + 1) ** 2))


# Optimization over the active norms

def gstar_center(problem, beta_E_scaled):
    return problem.A_bar @ beta_E_scaled + problem.b_bar


def gstar_objective(problem, g, beta_E_scaled):
    r = np.asarray(g) - gstar_center(problem, beta_E_scaled)
    return (0.5 * r @ problem.Omega_bar_inv @ r - log_jacobian(problem, g)
            + barrier(g, problem.barrier_c))


def _gstar_hessian(problem, g):
    return (problem.Omega_bar_inv - hess_log_jacobian(problem, g)
            + hess_barrier(g, problem.barrier_c))


def solve_gstar(problem, beta_E_scaled, tol=1e-9, max_iter=200, g0=None):
    """
    Minimize ``0.5 (g - m)^T Omega_bar^-1 (g - m) - log J(g) + Barr(g)`` with
    ``m = A_bar beta_E_scaled + b_bar`` by damped Newton.

    Steps are cut so that ``g`` keeps at least 1% of its distance to the
    barrier edge, then halved until the objective decreases.  The Hessian
    is checked to be positive definite at every iterate.
    """
    c = problem.barrier_c
    mvec = gstar_center(problem, beta_E_scaled)
    if g0 is None:
        g0 = np.maximum(problem.gamma_scaled, c + 1.)
    g = np.array(g0, dtype=float)
    Oi = problem.Omega_bar_inv

    def fval(x):
        r = x - mvec
        return 0.5 * r @ Oi @ r - log_jacobian(problem, x) + barrier(x, c)

    f = fval(g)
    if not np.isfinite(f):
        raise InfeasibleError("objective is not finite at the starting point")
    trace = []
    for it in range(max_iter):
        grad = Oi @ (g - mvec) - grad_log_jacobian(problem, g) + grad_barrier(g, c)
        gn = np.max(np.abs(grad))
        trace.append((f, gn))
        hess = _gstar_hessian(problem, g)
        try:
            ch = cho_factor(hess, lower=True)
        except LinAlgError:
            raise GStarConvergenceError("Hessian of the norm problem is not positive definite "
                                        "at iteration %d" % it, trace) from None
        step = -cho_solve(ch, grad)
        if gn < tol or np.max(np.abs(step)) < 1e-14 * max(1., np.max(np.abs(g))):
            # one last Newton step squares the remaining error
            final = g + step
            return final if np.all(final > c) else g
        neg = step < 0
        alpha = 1.
        if np.any(neg):
            alpha = min(1., np.min(0.99 * (g[neg] - c) / -step[neg]))
        if -(grad @ step) < 1e-10 * max(1., abs(f)) and alpha == 1.:
            # quadratic convergence region: objective differences are at
            # rounding level, so take the pure Newton step
            g = g + step
            f = fval(g)
            continue
        for _ in range(60):
            cand = g + alpha * step
            try:
                fc = fval(cand)
            except InfeasibleError:
                fc = np.inf
            if fc <= f + 1e-4 * alpha * (grad @ step):
                break
            alpha *= 0.5
        else:
            raise GStarConvergenceError("line search failed (gradient %.3g)" % gn, trace)
        if not np.isfinite(fc):
            raise InfeasibleError("objective is not finite along the Newton path")
        g, f = cand, fc
    raise GStarConvergenceError("no convergence in %d Newton steps (gradient %.3g)"
                                % (max_iter, trace[-1][1]), trace)


def selective_mle(problem, fit=None, gstar=None):
    """
    Selective MLE on the coefficient scale.

    ``fit`` may be omitted, in which case the refit stored in the problem
    is used.
    """
    beta = problem.beta_E_scaled if fit is None else np.sqrt(problem.n) * np.asarray(fit.beta_E)
    if gstar is None:
        gstar = solve_gstar(problem, beta)
    try:
        R_inv = np.linalg.inv(problem.R_bar)
    except LinAlgError:
        raise ConditioningError("R_bar is singular") from None
    resid = gstar_center(problem, beta) - gstar
    t = R_inv @ (beta - problem.s_bar) + problem.Sigma_E @ (problem.A_bar.T @ (problem.Omega_bar_inv @ resid))
    return t / np.sqrt(problem.n)


def observed_fisher(problem, fit=None, gstar=None):
    """
    ``n Sigma_E^-1 M^-1 Sigma_E^-1`` with
    ``M = Theta_bar^-1 + A_bar^T Omega_bar^-1 A_bar
    - A_bar^T Omega_bar^-1 Q^-1 Omega_bar^-1 A_bar`` and ``Q`` the Hessian
    of the norm problem at ``g*``.
    """
    if gstar is None:
        beta = problem.beta_E_scaled if fit is None else np.sqrt(problem.n) * np.asarray(fit.beta_E)
        gstar = solve_gstar(problem, beta)
    Q = _sym(_gstar_hessian(problem, gstar))
    cQ = _chol(Q, "Hessian of the norm problem")
    OA = problem.Omega_bar_inv @ problem.A_bar
    M = problem.Theta_bar_inv + problem.A_bar.T @ OA - OA.T @ cho_solve(cQ, OA)
    cM = _chol(_sym(M), "M")
    Minv_Sinv = cho_solve(cM, problem.Sigma_E_inv)
    fisher = problem.n * problem.Sigma_E_inv @ Minv_Sinv
    asym = np.max(np.abs(fisher - fisher.T)) / max(1e-300, np.max(np.abs(fisher)))
    assert asym < 1e-8, "Fisher information asymmetric (%.3g)" % asym
    return _sym(fisher)


def inverse_fisher(problem, gstar):
    """``Sigma_E M Sigma_E / n``, the covariance of the selective MLE."""
    Q = _sym(_gstar_hessian(problem, gstar))
    cQ = _chol(Q, "Hessian of the norm problem")
    OA = problem.Omega_bar_inv @ problem.A_bar
    M = problem.Theta_bar_inv + problem.A_bar.T @ OA - OA.T @ cho_solve(cQ, OA)
    return _sym(problem.Sigma_E @ M @ problem.Sigma_E) / problem.n


def variance_bound(problem):
    """
    ``u0 (1 + u0^2) / n`` with
    ``u0 = max(lambda_max(Sigma_E), lambda_max(A_cal^T Omega^-1 A_cal))``,
    an upper bound on every entry of the inverse Fisher information.
    """
    u0 = max(np.linalg.eigvalsh(problem.Sigma_E)[-1], np.linalg.eigvalsh(problem.AOA_cal)[-1])
    return u0 * (1 + u0 ** 2) / problem.n


@dataclass
class SelectiveFit:
    """Selective MLE with its Wald intervals and p-values."""
    mle: np.ndarray
    fisher: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    intervals: np.ndarray
    pvalues: np.ndarray
    group_pvalues: np.ndarray
    group_stats: np.ndarray
    group_df: np.ndarray
    alpha: float
    gstar: np.ndarray = None
    variance_bound: float = np.nan


def wald_inference(mle, fisher=None, alpha=0.1, group_positions=None, cov=None):
    """
    Wald intervals ``mle +- z_{1-alpha/2} se``, two-sided normal p-values and
    per-group chi-square tests of ``b_g = 0``.

    ``cov`` may be given instead of (or with) ``fisher``; it is used for the
    standard errors when present.
    """
    mle = np.asarray(mle, dtype=float)
    if cov is None:
        cov = _inv_pd(_sym(fisher), "Fisher information")
    cov = _sym(cov)
    se = np.sqrt(np.diag(cov))
    q = norm.ppf(1 - alpha / 2)
    intervals = np.column_stack([mle - q * se, mle + q * se])
    with np.errstate(divide="ignore", invalid="ignore"):
        zstat = np.where(se > 0, mle / se, 0.)
    pvalues = 2 * norm.sf(np.abs(zstat))
    if group_positions is None:
        group_positions = [np.array([j]) for j in range(mle.size)]
    stats, dfs, gp = [], [], []
    for pos in group_positions:
        pos = np.asarray(pos)
        sub = cov[np.ix_(pos, pos)]
        b = mle[pos]
        stat = float(b @ np.linalg.solve(sub, b))
        stats.append(stat)
        dfs.append(pos.size)
        gp.append(float(chi2.sf(stat, pos.size)))
    return SelectiveFit(mle=mle, fisher=fisher, cov=cov, se=se, intervals=intervals,
                        pvalues=pvalues, group_pvalues=np.array(gp), group_stats=np.array(stats),
                        group_df=np.array(dfs), alpha=alpha)


def selective_inference(problem, alpha=0.1):
    """MLE, Fisher information and Wald output for a built problem."""
    gstar = solve_gstar(problem, problem.beta_E_scaled)
    mle = selective_mle(problem, gstar=gstar)
    fisher = observed_fisher(problem, gstar=gstar)
    cov = inverse_fisher(problem, gstar)
    out = wald_inference(mle, fisher, alpha, problem.group_positions, cov=cov)
    out.gstar = gstar
    out.variance_bound = variance_bound(problem)
    return out


# Reference evaluation of the conditional log-likelihood

def _inner_objective(problem, mu, B, G):
    rB = B - mu
    rG = G - problem.A_bar @ B - problem.b_bar
    return (0.5 * rB @ problem.Theta_bar_inv @ rB + 0.5 * rG @ problem.Omega_bar_inv @ rG
            - log_jacobian(problem, G) + barrier(G, problem.barrier_c))


def inner_infimum(problem, mu, tol=1e-11, max_iter=200):
    """
    ``inf_{B, G}`` of the two-block objective in the conditional
    log-likelihood, by joint damped Newton over ``(B, G)``.

    Returns ``(value, B, G)``.
    """
    k = mu.size
    A = problem.A_bar
    Oi = problem.Omega_bar_inv
    Ti = problem.Theta_bar_inv
    c = problem.barrier_c
    B = np.array(mu, dtype=float)
    G = np.maximum(A @ B + problem.b_bar, c + 1.)
    f = _inner_objective(problem, mu, B, G)
    for _ in range(max_iter):
        rG = G - A @ B - problem.b_bar
        gB = Ti @ (B - mu) - A.T @ (Oi @ rG)
        gG = Oi @ rG - grad_log_jacobian(problem, G) + grad_barrier(G, c)
        grad = np.concatenate([gB, gG])
        if np.max(np.abs(grad)) < tol * max(1., np.max(np.abs(mu))):
            return f, B, G
        hess = np.block([[Ti + A.T @ Oi @ A, -A.T @ Oi],
                         [-Oi @ A, Oi - hess_log_jacobian(problem, G) + hess_barrier(G, c)]])
        step = -np.linalg.solve(hess, grad)
        decrement = -(grad @ step)
        sB, sG = step[:k], step[k:]
        alpha = 1.
        neg = sG < 0
        if np.any(neg):
            alpha = min(1., np.min(0.99 * (G[neg] - c) / -sG[neg]))
        if decrement < 1e-10 * max(1., abs(f)) and alpha == 1.:
            # inside the quadratic convergence region, where objective
            # differences drown in rounding: take the pure Newton step
            B, G = B + sB, G + sG
            f = _inner_objective(problem, mu, B, G)
            continue
        for _ in range(80):
            try:
                fc = _inner_objective(problem, mu, B + alpha * sB, G + alpha * sG)
            except InfeasibleError:
                fc = np.inf
            if fc <= f:
                break
            alpha *= 0.5
        else:
            return f, B, G
        B, G, f = B + alpha * sB, G + alpha * sG, fc
    raise GStarConvergenceError("inner infimum did not converge")


def brute_force_loglik(problem, fit=None, bstar=None):
    """
    Conditional log-likelihood of the target ``bstar`` (coefficient scale),
    up to an additive constant: the Gaussian log-density of
    ``sqrt(n) beta_E`` plus the two-block infimum, both evaluated directly.
    """
    beta = problem.beta_E_scaled if fit is None else np.sqrt(problem.n) * np.asarray(fit.beta_E)
    t = np.sqrt(problem.n) * np.asarray(bstar, dtype=float)
    mu = problem.R_bar @ t + problem.s_bar
    logdens = multivariate_normal.logpdf(beta, mean=mu, cov=problem.Theta_bar)
    val, _, _ = inner_infimum(problem, mu)
    return float(logdens + val)
