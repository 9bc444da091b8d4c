"""
Randomized group lasso.

Solves::

    minimize_beta  l(X beta; y) / sqrt(n) + sum_g lambda_g ||beta_g||_2
                   - sqrt(n) omega^T beta

and extracts the selection triple: active group norms ``gamma``, unit
directions ``u`` of the active groups, and subgradients ``z`` of the inactive
groups, the latter recovered from the stationarity condition.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from .model import loss_value

logger = logging.getLogger(__name__)


class SolverConvergenceError(RuntimeError):
    def __init__(self, message, residual=np.nan, iterations=0):
        self.residual = residual
        self.iterations = iterations
        super().__init__("%s (residual=%.3g after %d iterations)" % (message, residual, iterations))


class DegenerateResponseError(ValueError):
    pass


@dataclass
class Penalty:
    """
    Per-group penalty weights on the scale of the randomized objective,
    where the loss enters divided by sqrt(n).

    ``unscaled`` gives the same weights for the loss without the 1/sqrt(n)
    factor, which is the scale of the usual universal-threshold formula.
    """
    lambda_g: np.ndarray
    n: int = None
    allow_zero: bool = False

    def __post_init__(self):
        self.lambda_g = np.asarray(self.lambda_g, dtype=float).ravel()
        if np.any(~np.isfinite(self.lambda_g)) and not np.all(np.isposinf(self.lambda_g[~np.isfinite(self.lambda_g)])):
            raise ValueError("penalty weights must be finite or +inf")
        if self.allow_zero:
            if np.any(self.lambda_g < 0):
                raise ValueError("negative penalty weight")
        elif np.any(self.lambda_g <= 0):
            raise ValueError("penalty weights must be positive, got %s" % self.lambda_g)

    @property
    def unscaled(self):
        return self.lambda_g * np.sqrt(self.n)

    def scaled(self, factor):
        return Penalty(self.lambda_g * factor, n=self.n, allow_zero=self.allow_zero)

    def expand(self, groups):
        """Per-column penalty, constant within groups."""
        out = np.empty(groups.p)
        for k, g in enumerate(groups):
            out[g] = self.lambda_g[k]
        return out


def default_lambda(ds, groups, base_lambda):
    """
    Group-size adjusted universal threshold.

    On the unscaled loss the weight is
    ``base * sqrt(|g| / mean|g| * n * Var(y) * 2 log p)``; the returned
    penalty holds that value divided by sqrt(n).
    """
    if base_lambda <= 0:
        raise ValueError("base_lambda must be positive")
    var_y = np.var(ds.y, ddof=1)
    if not var_y > 0:
        raise DegenerateResponseError("response has zero variance")
    sizes = groups.sizes
    rel = sizes / sizes.mean()
    unscaled = base_lambda * np.sqrt(rel * ds.n * var_y * 2 * np.log(ds.p))
    if not np.all(unscaled > 0):
        raise DegenerateResponseError("universal threshold is zero (p=%d)" % ds.p)
    return Penalty(unscaled / np.sqrt(ds.n), n=ds.n)


@dataclass
class RandomizationSpec:
    """
    Gaussian randomization with ``sqrt(n) omega ~ N(0, Omega)``.

    ``omega`` is the realized draw on the omega scale, not multiplied by
    sqrt(n).
    """
    form: str
    f: float
    Omega: np.ndarray
    omega: np.ndarray
    n: int
    seed: object = None
    H_hat: np.ndarray = None
    repaired: bool = False

    @property
    def sqrt_n_omega(self):
        return np.sqrt(self.n) * self.omega


def _sym_sqrt(M):
    evals, evecs = np.linalg.eigh(M)
    evals = np.clip(evals, 0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def draw_randomization(form, f, H_hat, seed, n, Omega=None):
    """
    Draw ``omega`` with ``sqrt(n) omega ~ N(0, Omega)``.

    ``form="scaled_H"`` uses ``Omega = f * H_hat``; ``H_hat`` with
    eigenvalues below 1e-10 receives a ridge of ``1e-8 tr(H_hat) / p``
    first.  ``form="explicit"`` uses ``Omega`` as given.  ``f = 0`` gives a
    zero draw (unrandomized problem).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    repaired = False
    if form == "scaled_H":
        H_hat = np.asarray(H_hat, dtype=float)
        p = H_hat.shape[0]
        H_use = 0.5 * (H_hat + H_hat.T)
        if np.linalg.eigvalsh(H_use)[0] < 1e-10:
            H_use = H_use + 1e-8 * np.trace(H_use) / p * np.identity(p)
            repaired = True
            logger.info("randomization: ridge-repaired H_hat before scaling")
        if f < 0:
            raise ValueError("randomization scale f must be nonnegative")
        Omega = f * H_use
    elif form == "explicit":
        Omega = np.asarray(Omega, dtype=float)
        Omega = 0.5 * (Omega + Omega.T)
        H_use = H_hat
        p = Omega.shape[0]
    else:
        raise ValueError("unknown randomization form %r" % form)
    xi = rng.standard_normal(p)
    if f == 0 and form == "scaled_H":
        omega = np.zeros(p)
    else:
        evals = np.linalg.eigvalsh(Omega)
        if evals[0] <= 0:
            raise np.linalg.LinAlgError("randomization covariance is not positive definite "
                                        "(min eigenvalue %.3g)" % evals[0])
        omega = _sym_sqrt(Omega) @ xi / np.sqrt(n)
    return RandomizationSpec(form=form, f=float(f), Omega=Omega, omega=omega, n=n,
                             seed=seed if not isinstance(seed, np.random.Generator) else None,
                             H_hat=H_use, repaired=repaired)


def no_randomization(p, n):
    return RandomizationSpec(form="explicit", f=0., Omega=np.zeros((p, p)),
                             omega=np.zeros(p), n=n)


@dataclass
class SolverOptions:
    max_iter: int = 5000
    tol: float = 1e-10
    kkt_tol: float = 1e-9
    active_tol: float = 1e-8
    polish: bool = True
    method: str = "fista"


@dataclass
class GroupLassoSolution:
    beta_lasso: np.ndarray
    E: np.ndarray
    active_groups: np.ndarray
    gamma: np.ndarray
    u: list
    z: dict
    kkt_residual: float
    penalty: Penalty
    iterations: int = 0
    degenerate: bool = False
    objective_trace: list = field(default_factory=list, repr=False)

    @property
    def empty(self):
        return self.active_groups.size == 0

    @property
    def inactive_groups(self):
        return np.array(sorted(self.z), dtype=int)

    def u_vector(self):
        """Stacked active directions, in the order of ``E``."""
        return np.concatenate(self.u) if self.u else np.zeros(0)

    def z_vector(self, groups):
        """Stacked inactive subgradients, in the order of the inactive columns."""
        if not self.z:
            return np.zeros(0)
        return np.concatenate([self.z[k] for k in self.inactive_groups])

    @property
    def max_z_norm(self):
        if not self.z:
            return 0.
        return max(np.linalg.norm(v) for v in self.z.values())


def group_norms(v, groups):
    return np.sqrt(np.bincount(groups.column_group, weights=v * v, minlength=len(groups)))


def group_soft_threshold(v, thresh, groups):
    """Blockwise ``max(0, 1 - t_g / ||v_g||) v_g``."""
    norms = group_norms(v, groups)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > thresh, 1 - thresh / norms, 0.)
    return v * scale[groups.column_group]


class _Objective:

    def __init__(self, model, ds, groups, penalty, rand):
        self.model = model
        self.ds = ds
        self.groups = groups
        self.lam = penalty.lambda_g
        self.sqn = np.sqrt(ds.n)
        self.linear = rand.sqrt_n_omega

    def smooth(self, beta):
        eta = self.ds.X @ beta
        val = np.sum(self.model.rho(eta, self.ds.y)) / self.sqn - self.linear @ beta
        return val

    def smooth_grad(self, beta):
        eta = self.ds.X @ beta
        return self.ds.X.T @ self.model.d1(eta, self.ds.y) / self.sqn - self.linear

    def smooth_both(self, beta):
        eta = self.ds.X @ beta
        val = np.sum(self.model.rho(eta, self.ds.y)) / self.sqn - self.linear @ beta
        grad = self.ds.X.T @ self.model.d1(eta, self.ds.y) / self.sqn - self.linear
        return val, grad

    def penalty(self, beta):
        norms = group_norms(beta, self.groups)
        nz = norms > 0
        return float(self.lam[nz] @ norms[nz])

    def __call__(self, beta):
        return self.smooth(beta) + self.penalty(beta)


def _fista(obj, beta0, opts, L0):
    """Accelerated proximal gradient with backtracking and function-value restart."""
    groups = obj.groups
    lam = obj.lam
    beta = beta0.copy()
    y = beta.copy()
    t_mom = 1.
    L = L0
    F_prev = obj(beta)
    trace = [F_prev]
    mapping = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        fy, gy = obj.smooth_both(y)
        while True:
            step = 1. / L
            cand = group_soft_threshold(y - step * gy, step * lam, groups)
            diff = cand - y
            fc = obj.smooth(cand)
            if fc <= fy + gy @ diff + 0.5 * L * diff @ diff + 1e-12 * abs(fy):
                break
            L *= 2.
        F_cand = fc + obj.penalty(cand)
        mapping = np.max(np.abs(diff)) * L
        if F_cand > F_prev:
            if t_mom == 1.:
                # a plain proximal step failed to decrease: at numerical optimum
                break
            # restart: take a plain proximal step from the current iterate
            y = beta.copy()
            t_mom = 1.
            continue
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t_mom ** 2))
        y = cand + ((t_mom - 1) / t_next) * (cand - beta)
        rel = abs(F_prev - F_cand) / max(1., abs(F_cand))
        beta = cand
        t_mom = t_next
        F_prev = F_cand
        trace.append(F_cand)
        # allow the step to grow again slowly
        L = max(L / 1.05, 1e-12)
        if mapping < opts.kkt_tol or (rel < opts.tol and mapping < np.sqrt(opts.kkt_tol)):
            break
    return beta, it, mapping, trace


def _bcd(obj, beta0, opts):
    """Block coordinate descent with per-block proximal steps (fallback)."""
    X = obj.ds.X
    groups = obj.groups
    lam = obj.lam
    beta = beta0.copy()
    blockL = []
    wmax = {"gaussian": 1., "logistic": 0.25}.get(obj.model.kind)
    for g in groups:
        s = np.linalg.norm(X[:, g], 2) ** 2 / obj.sqn
        blockL.append(s * (wmax if wmax is not None else 1.))
    trace = [obj(beta)]
    mapping = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        for k, g in enumerate(groups):
            grad = obj.smooth_grad(beta)[g]
            Lk = blockL[k]
            while True:
                cand = beta.copy()
                v = beta[g] - grad / Lk
                nrm = np.linalg.norm(v)
                cand[g] = (1 - lam[k] / (Lk * nrm)) * v if nrm > lam[k] / Lk else 0.
                if obj(cand) <= obj(beta) + 1e-14:
                    break
                Lk *= 2
            blockL[k] = Lk
            beta = cand
        F = obj(beta)
        trace.append(F)
        g_all = obj.smooth_grad(beta)
        L = max(blockL)
        mapping = L * np.max(np.abs(group_soft_threshold(beta - g_all / L, lam / L, groups) - beta))
        if mapping < opts.kkt_tol:
            break
    return beta, it, mapping, trace


def _newton_polish(obj, beta, active, max_iter=50):
    """
    Newton's method on the active groups, where the objective is smooth.

    Returns the polished vector or None if a group collapses toward zero.
    """
    groups = obj.groups
    cols = np.concatenate([groups[k] for k in active])
    X_A = obj.ds.X[:, cols]
    y = obj.ds.y
    sqn = obj.sqn
    lin = obj.linear[cols]
    # positions of each active group inside cols
    pos = []
    start = 0
    for k in active:
        pos.append(np.arange(start, start + groups[k].size))
        start += groups[k].size
    lam = obj.lam[active]

    def f_A(b):
        return (np.sum(obj.model.rho(X_A @ b, y)) / sqn - lin @ b
                + sum(lam[i] * np.linalg.norm(b[pp]) for i, pp in enumerate(pos)))

    b = beta[cols].copy()
    for _ in range(max_iter):
        eta = X_A @ b
        grad = X_A.T @ obj.model.d1(eta, y) / sqn - lin
        hess = (X_A * obj.model.d2(eta, y)[:, None]).T @ X_A / sqn
        for i, pp in enumerate(pos):
            nrm = np.linalg.norm(b[pp])
            if nrm < 1e-10:
                return None
            u = b[pp] / nrm
            grad[pp] += lam[i] * u
            hess[np.ix_(pp, pp)] += lam[i] / nrm * (np.identity(pp.size) - np.outer(u, u))
        if np.max(np.abs(grad)) < 1e-13 * max(1., np.max(np.abs(lin))):
            break
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        f0 = f_A(b)
        s = 1.
        for _ in range(60):
            cand = b - s * step
            if all(np.linalg.norm(cand[pp]) > 0 for pp in pos) and f_A(cand) <= f0 - 1e-4 * s * grad @ step:
                break
            s *= 0.5
        else:
            break
        b = cand
        if s * np.max(np.abs(step)) < 1e-15 * max(1., np.max(np.abs(b))):
            break
    out = np.zeros_like(beta)
    out[cols] = b
    return out


def _extract(obj, beta, penalty, opts, iterations, trace):
    groups = obj.groups
    lam = obj.lam
    grad = obj.smooth_grad(beta)  # (1/sqrt n) X^T grad l - sqrt(n) omega
    norms = group_norms(beta, groups)
    active = np.flatnonzero(norms > opts.active_tol)
    degenerate = bool(np.any((norms > 0) & (norms <= 10 * opts.active_tol)))
    u = [beta[groups[k]] / norms[k] for k in active]
    z = {}
    resid = 0.
    active_set = set(active.tolist())
    for k, g in enumerate(groups):
        if k in active_set:
            continue
        if lam[k] > 0:
            z[k] = -grad[g] / lam[k]
        else:
            z[k] = np.zeros(g.size)
            resid = max(resid, np.max(np.abs(grad[g])))
    for i, k in enumerate(active):
        r = grad[groups[k]] + lam[k] * u[i]
        resid = max(resid, np.max(np.abs(r)))
    E = groups.columns(active)
    return GroupLassoSolution(beta_lasso=beta, E=E, active_groups=active,
                              gamma=norms[active], u=u, z=z, kkt_residual=float(resid),
                              penalty=penalty, iterations=iterations,
                              degenerate=degenerate, objective_trace=trace)


def solve_group_lasso(model, ds, groups, penalty, rand, opts=None, beta0=None):
    """
    Solve the randomized group-lasso problem.

    Raises
    ------
    SolverConvergenceError
        If the proximal-gradient mapping does not fall below
        ``opts.kkt_tol`` within ``opts.max_iter`` iterations and the
        active-set Newton polish cannot certify the solution either.
    """
    opts = opts or SolverOptions()
    obj = _Objective(model, ds, groups, penalty, rand)
    beta0 = np.zeros(ds.p) if beta0 is None else np.asarray(beta0, float).copy()
    if opts.method == "bcd":
        beta, it, mapping, trace = _bcd(obj, beta0, opts)
    else:
        wmax = {"gaussian": 1., "logistic": 0.25}.get(model.kind)
        if wmax is None:
            wmax = float(np.max(model.d2(ds.X @ beta0, ds.y)))
        L0 = max(np.linalg.norm(ds.X, 2) ** 2 * wmax / np.sqrt(ds.n), 1e-8)
        beta, it, mapping, trace = _fista(obj, beta0, opts, L0 * 0.5)
    sol = _extract(obj, beta, penalty, opts, it, trace)
    if opts.polish and not sol.empty:
        polished = _newton_polish(obj, beta, sol.active_groups)
        if polished is not None:
            cand = _extract(obj, polished, penalty, opts, it, trace)
            same = np.array_equal(cand.active_groups, sol.active_groups)
            if same and cand.max_z_norm <= 1 + 1e-8 and cand.kkt_residual <= sol.kkt_residual + 1e-12 \
                    and obj(polished) <= obj(beta) + 1e-10 * max(1., abs(obj(beta))):
                sol = cand
    if mapping >= opts.kkt_tol and sol.kkt_residual > 1e-5:
        raise SolverConvergenceError("group lasso did not converge", residual=sol.kkt_residual,
                                     iterations=it)
    return sol


def check_selection_event(sol):
    """
    Whether the realized selection satisfies the sign characterization:
    every active norm strictly positive and every direction of unit length.
    """
    if sol.degenerate or sol.empty:
        return False
    if np.any(sol.gamma <= 0):
        return False
    return all(abs(np.linalg.norm(u) - 1) < 1e-10 for u in sol.u)


def objective(model, ds, groups, penalty, rand, beta):
    """Value of the randomized objective, for checks."""
    return (loss_value(model, ds, beta) / np.sqrt(ds.n) - rand.sqrt_n_omega @ beta
            + float(penalty.lambda_g @ group_norms(beta, groups)))
