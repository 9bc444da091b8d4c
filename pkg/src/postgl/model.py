"""
Datasets, group partitions and the convex loss models used throughout.

A loss model is a per-observation function ``rho(theta; y)`` of the linear
predictor ``theta = x_i^T beta``.  The total loss is the sum over rows, so
the gradient with respect to ``beta`` is ``X^T rho'(X beta)`` and the
Hessian is ``X^T diag(rho''(X beta)) X``.

Only single-index losses are supported.  Multi-parameter losses (location,
scale and shape models) or smoothed check losses can be added by providing
the same three callables (value, first and second derivative in ``theta``).
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy

KINDS = ("gaussian", "logistic", "poisson", "quasi_poisson")

# e^700 is close to the largest finite double
_EXP_LIMIT = 700.


class ModelError(ValueError):
    """Incompatible data / model combination."""


class OverflowLossError(ArithmeticError):
    """The linear predictor overflowed the exponential."""

    def __init__(self, row, theta):
        self.row = int(row)
        self.theta = float(theta)
        super().__init__("linear predictor overflow at row %d (theta=%g)"
                         % (self.row, self.theta))


class RankDeficiencyError(np.linalg.LinAlgError):
    """A block of H that must be positive definite is not."""

    def __init__(self, message, group=None):
        self.group = group
        super().__init__(message)


class DegreesOfFreedomError(ValueError):
    pass


@dataclass
class Dataset:
    """
    Response and design.

    Parameters
    ----------
    y : np.ndarray
        Response, length n.
    X : np.ndarray
        Design, n x p.
    column_names : list of str, optional
    """
    y: np.ndarray
    X: np.ndarray
    column_names: list = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ModelError("X must be two dimensional")
        n, p = self.X.shape
        if self.y.shape[0] != n:
            raise ModelError("y has %d rows, X has %d" % (self.y.shape[0], n))
        if n < 2 or p < 1:
            raise ModelError("need n >= 2 and p >= 1, got n=%d, p=%d" % (n, p))
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ModelError("non-finite values in data")
        zero = np.flatnonzero(~np.any(self.X != 0, axis=0))
        if zero.size:
            raise ModelError("all-zero columns: %s" % zero.tolist())
        if self.column_names is None:
            self.column_names = ["x%d" % j for j in range(p)]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.X[rows], list(self.column_names))


class GroupStructure:
    """
    Ordered partition of the columns ``0..p-1`` into nonempty groups.

    The order of ``groups`` is the order used for every block matrix built
    downstream.
    """

    def __init__(self, groups, p=None, labels=None):
        groups = [np.asarray(g, dtype=int).ravel() for g in groups]
        if any(g.size == 0 for g in groups):
            raise ModelError("empty group")
        allidx = np.concatenate(groups) if groups else np.array([], int)
        if p is None:
            p = allidx.size
        if allidx.size != p or not np.array_equal(np.sort(allidx), np.arange(p)):
            raise ModelError("groups must partition range(%d) without overlap" % p)
        self.groups = groups
        self.p = p
        self.labels = list(labels) if labels is not None else [str(k) for k in range(len(groups))]
        self.column_group = np.empty(p, dtype=int)
        for k, g in enumerate(groups):
            self.column_group[g] = k

    @classmethod
    def from_labels(cls, labels):
        """Groups from a per-column label sequence, in order of first appearance."""
        order = {}
        for j, lab in enumerate(labels):
            order.setdefault(lab, []).append(j)
        return cls(list(order.values()), p=len(labels), labels=list(order))

    @classmethod
    def singletons(cls, p):
        return cls([[j] for j in range(p)], p=p)

    @property
    def sizes(self):
        return np.array([g.size for g in self.groups])

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, k):
        return self.groups[k]

    def __repr__(self):
        return "GroupStructure(sizes=%s)" % self.sizes.tolist()

    def columns(self, group_ids):
        if len(group_ids) == 0:
            return np.array([], dtype=int)
        return np.concatenate([self.groups[k] for k in group_ids])


@dataclass(frozen=True)
class LossModel:
    """
    Per-observation convex loss in the linear predictor.

    ``dispersion_floor`` applies to the Pearson dispersion of the
    quasi-Poisson model only.  Prior weights in the quasi-likelihood are
    fixed at one.
    """
    kind: str = "gaussian"
    dispersion_floor: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError("unknown loss %r, expected one of %s" % (self.kind, KINDS))

    @property
    def is_likelihood(self):
        """K equals H (up to a scalar fixed by the model) under the plug-in."""
        return self.kind in ("logistic", "poisson")

    def check_response(self, y):
        y = np.asarray(y)
        if self.kind == "logistic" and not np.all((y == 0) | (y == 1)):
            raise ModelError("logistic loss needs a 0/1 response")
        if self.kind in ("poisson", "quasi_poisson"):
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise ModelError("%s loss needs nonnegative integer counts" % self.kind)

    def _guard(self, theta):
        if self.kind in ("poisson", "quasi_poisson"):
            bad = np.flatnonzero(~(theta < _EXP_LIMIT))
            if bad.size:
                raise OverflowLossError(bad[0], theta[bad[0]])
        elif not np.all(np.isfinite(theta)):
            bad = np.flatnonzero(~np.isfinite(theta))
            raise OverflowLossError(bad[0], theta[bad[0]])

    def rho(self, theta, y):
        theta = np.asarray(theta, dtype=float)
        self._guard(theta)
        if self.kind == "gaussian":
            return 0.5 * (y - theta) ** 2
        if self.kind == "logistic":
            # log(1 + e^theta) evaluated on the stable branch
            return np.logaddexp(0., theta) - y * theta
        if self.kind == "poisson":
            return np.exp(theta) - y * theta
        # quasi-Poisson: -int_y^mu (y - u) / u du with mu = e^theta
        return np.exp(theta) - y * theta - y + xlogy(y, y)

    def d1(self, theta, y):
        theta = np.asarray(theta, dtype=float)
        self._guard(theta)
        if self.kind == "gaussian":
            return theta - y
        if self.kind == "logistic":
            return expit(theta) - y
        return np.exp(theta) - y

    def d2(self, theta, y=None):
        theta = np.asarray(theta, dtype=float)
        self._guard(theta)
        if self.kind == "gaussian":
            return np.ones_like(theta)
        if self.kind == "logistic":
            h = expit(theta)
            return h * (1 - h)
        return np.exp(theta)

    def mean(self, theta):
        if self.kind == "gaussian":
            return np.asarray(theta, dtype=float)
        if self.kind == "logistic":
            return expit(theta)
        self._guard(np.asarray(theta, dtype=float))
        return np.exp(theta)

    def link(self, mu):
        """Inverse of :meth:`mean`, used for pilot (intercept-only) weights."""
        if self.kind == "gaussian":
            return mu
        if self.kind == "logistic":
            return np.log(mu / (1 - mu))
        return np.log(mu)


def _full_beta(p, beta_E, E):
    beta = np.zeros(p)
    beta[np.asarray(E, dtype=int)] = beta_E
    return beta


def _linear_predictor(ds, beta_E, E):
    E = np.asarray(E, dtype=int)
    if E.size == 0:
        return np.zeros(ds.n)
    return ds.X[:, E] @ np.asarray(beta_E, dtype=float)


def loss_value(model, ds, beta):
    """Total loss ``sum_i rho(x_i^T beta; y_i)`` at a full p-vector."""
    theta = ds.X @ np.asarray(beta, dtype=float)
    return float(np.sum(model.rho(theta, ds.y)))


def gradient(model, ds, beta_E, E):
    """Full p-vector ``X^T grad l(X_E beta_E; y)``."""
    theta = _linear_predictor(ds, beta_E, E)
    return ds.X.T @ model.d1(theta, ds.y)


def hessian_diag(model, ds, beta_E, E):
    """Diagonal of the n x n Hessian of the loss in the linear predictor."""
    theta = _linear_predictor(ds, beta_E, E)
    return model.d2(theta, ds.y)


def estimate_dispersion(model, ds, beta_E, E):
    """
    Dispersion of the model at the restricted fit.

    Pearson estimator floored at ``model.dispersion_floor`` for the
    quasi-Poisson model, residual variance ``RSS / (n - |E|)`` for the
    Gaussian model, and exactly one for the likelihood models.
    """
    E = np.asarray(E, dtype=int)
    if model.is_likelihood:
        return 1.0
    df = ds.n - E.size
    if df <= 0:
        raise DegreesOfFreedomError("n=%d <= |E|=%d" % (ds.n, E.size))
    theta = _linear_predictor(ds, beta_E, E)
    if model.kind == "gaussian":
        return float(np.sum((ds.y - theta) ** 2) / df)
    # fitted means can underflow to zero in near-separated fits
    mu = np.maximum(model.mean(theta), np.finfo(float).tiny)
    phi = float(np.sum((ds.y - mu) ** 2 / mu) / df)
    return max(phi, model.dispersion_floor)


@dataclass
class MomentMatrices:
    """
    Plug-in Hessian and gradient-covariance matrices.

    ``H = X^T diag(rho'') X / n`` and ``K = dispersion * H`` (``K is`` a copy of
    ``H`` for the likelihood models).  Blocks are taken in the original
    column order of ``E`` and of its complement.
    """
    H: np.ndarray
    K: np.ndarray
    E: np.ndarray
    beta_E: np.ndarray
    dispersion: float = 1.0
    Eprime: np.ndarray = None

    def __post_init__(self):
        p = self.H.shape[0]
        self.E = np.asarray(self.E, dtype=int)
        if self.Eprime is None:
            mask = np.ones(p, bool)
            mask[self.E] = False
            self.Eprime = np.flatnonzero(mask)
        self.Eprime = np.asarray(self.Eprime, dtype=int)

    def _block(self, M, rows, cols):
        return M[np.ix_(rows, cols)]

    @property
    def H_EE(self):
        return self._block(self.H, self.E, self.E)

    @property
    def H_EpE(self):
        return self._block(self.H, self.Eprime, self.E)

    @property
    def K_EE(self):
        return self._block(self.K, self.E, self.E)

    @property
    def K_EpE(self):
        return self._block(self.K, self.Eprime, self.E)

    @property
    def K_EpEp(self):
        return self._block(self.K, self.Eprime, self.Eprime)


def weighted_gram(X, w):
    return (X * w[:, None]).T @ X


def estimate_moments(model, ds, beta_E, E, groups=None, Eprime=None):
    """
    Plug-in moment matrices at the E-supported coefficient vector.

    Raises
    ------
    RankDeficiencyError
        If ``H_{E,E}`` is not positive definite; the offending group is
        reported when ``groups`` is given.
    """
    E = np.asarray(E, dtype=int)
    w = hessian_diag(model, ds, beta_E, E)
    H = weighted_gram(ds.X, w) / ds.n
    H = 0.5 * (H + H.T)
    disp = estimate_dispersion(model, ds, beta_E, E)
    if model.is_likelihood:
        K = H.copy()
    else:
        K = disp * H
    moments = MomentMatrices(H=H, K=K, E=E, beta_E=np.asarray(beta_E, float),
                             dispersion=disp, Eprime=Eprime)
    if E.size:
        check_pd(moments.H_EE, "H_{E,E}", columns=E, groups=groups)
    return moments


def check_pd(M, name="matrix", columns=None, groups=None):
    """Cholesky factor of ``M``; raises RankDeficiencyError naming the culprit."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    # locate the first column whose addition breaks positive definiteness
    k = M.shape[0]
    culprit = None
    for j in range(1, k + 1):
        try:
            np.linalg.cholesky(M[:j, :j])
        except np.linalg.LinAlgError:
            culprit = j - 1
            break
    msg = "%s is not positive definite" % name
    group = None
    if culprit is not None and columns is not None:
        col = int(columns[culprit])
        msg += " (column %d" % col
        if groups is not None:
            group = int(groups.column_group[col])
            msg += ", group %s" % groups.labels[group]
        msg += ")"
    raise RankDeficiencyError(msg, group=group)
