"""
Simulation studies comparing randomized selective inference with data
splitting and naive inference.

Each replication draws its own design, response, randomization and split
from an independent stream seeded by ``(master_seed, replication)``, so
results do not depend on how replications are scheduled.
"""

from dataclasses import asdict, dataclass, field, fields
import csv
import io
import json
import logging
import math
import os
import time

import numpy as np

from .baselines import SplitPlan, data_splitting_inference, naive_inference
from .glasso import default_lambda
from .model import Dataset, GroupStructure, LossModel, OverflowLossError
from .pipeline import post_gl_inference
from .restricted import fit_restricted

logger = logging.getLogger(__name__)

RESPONSES = ("gaussian", "logistic", "poisson", "negbin")
LOSS_FOR = {"gaussian": "gaussian", "logistic": "logistic", "poisson": "poisson",
            "negbin": "quasi_poisson"}
METHODS = ("post_gl", "split", "naive")
THREADS_ENV = "POSTGL_THREADS"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class SimConfig:
    """
    Simulation settings.

    ``f=None`` picks ``(1 - r) / r`` for the likelihood responses and 1 for
    the negative binomial (analyzed by quasi-likelihood).  ``signal_scale``
    multiplies the signal size ``m = sqrt(2 tau log p)``.
    """
    n: int = 500
    n_continuous: int = 120
    n_discrete_groups: int = 20
    levels: int = 5
    continuous_group_size: int = 4
    encoding: str = "drop_first"
    response: str = "gaussian"
    sigma: float = 5.0
    phi: float = 1.5
    tau: float = 0.1
    signal_scale: float = 1.0
    random_signs: bool = True
    s_c: int = 3
    s_d: int = 2
    rho: float = 0.3
    base_lambda: float = 1.0
    f: float = None
    r: float = 0.67
    reps: int = 500
    alpha: float = 0.1
    master_seed: int = 2024
    n_oracle_factor: int = 50
    barrier_c: float = 0.0
    workers: int = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError("%s: %s (got %r)" % (name, msg, getattr(self, name)))
        need(isinstance(self.n, int) and self.n >= 10, "n", "integer >= 10")
        need(self.n_continuous >= 0, "n_continuous", "nonnegative")
        need(self.n_discrete_groups >= 0, "n_discrete_groups", "nonnegative")
        need(self.levels >= 2, "levels", "at least 2")
        need(self.continuous_group_size >= 1, "continuous_group_size", "positive")
        need(self.n_continuous % self.continuous_group_size == 0, "n_continuous",
             "multiple of continuous_group_size")
        need(self.encoding in ("drop_first", "full"), "encoding", "'drop_first' or 'full'")
        need(self.response in RESPONSES, "response", "one of %s" % (RESPONSES,))
        need(self.sigma > 0, "sigma", "positive")
        need(self.phi > 1, "phi", "greater than 1")
        need(self.tau >= 0, "tau", "nonnegative")
        need(self.signal_scale >= 0, "signal_scale", "nonnegative")
        need(0 <= self.s_c <= self.n_continuous // self.continuous_group_size, "s_c",
             "at most the number of continuous groups")
        need(0 <= self.s_d <= self.n_discrete_groups, "s_d", "at most n_discrete_groups")
        need(-1 < self.rho < 1, "rho", "in (-1, 1)")
        need(self.base_lambda > 0, "base_lambda", "positive")
        need(self.f is None or self.f > 0, "f", "positive or null")
        need(0 < self.r < 1, "r", "in (0, 1)")
        need(isinstance(self.reps, int) and self.reps >= 1, "reps", "positive integer")
        need(0 < self.alpha < 1, "alpha", "in (0, 1)")
        need(isinstance(self.master_seed, int) and self.master_seed >= 0, "master_seed",
             "nonnegative integer")
        need(self.n_oracle_factor >= 1, "n_oracle_factor", "at least 1")
        need(self.p >= 2, "p", "design needs at least two columns")

    @property
    def per_discrete(self):
        return self.levels - 1 if self.encoding == "drop_first" else self.levels

    @property
    def p(self):
        return self.n_continuous + self.n_discrete_groups * self.per_discrete

    @property
    def m(self):
        """Signal size ``sqrt(2 tau log p)``."""
        return math.sqrt(2 * self.tau * math.log(self.p))

    @property
    def randomization_scale(self):
        if self.f is not None:
            return self.f
        return 1.0 if self.response == "negbin" else (1 - self.r) / self.r

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("%s: unknown field" % unknown[0])
        for name in ("n", "reps", "master_seed", "n_continuous", "n_discrete_groups", "levels",
                     "s_c", "s_d", "continuous_group_size"):
            if name in d and not (isinstance(d[name], int) and not isinstance(d[name], bool)):
                raise ConfigError("%s: expected an integer (got %r)" % (name, d[name]))
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["p"] = self.p
        d["m"] = self.m
        d["f_used"] = self.randomization_scale
        return d


def _ar1_factor(k, rho):
    idx = np.arange(k)
    S = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(S)


def _draw_X(cfg, n, rng, L=None):
    parts = []
    if cfg.n_continuous:
        L = _ar1_factor(cfg.n_continuous, cfg.rho) if L is None else L
        parts.append(rng.standard_normal((n, cfg.n_continuous)) @ L.T)
    if cfg.n_discrete_groups:
        lev = rng.integers(0, cfg.levels, size=(n, cfg.n_discrete_groups))
        onehot = (lev[:, :, None] == np.arange(cfg.levels)[None, None, :]).astype(float)
        if cfg.encoding == "drop_first":
            onehot = onehot[:, :, 1:]
        parts.append(onehot.reshape(n, -1))
    return np.hstack(parts)


def design_groups(cfg):
    groups, labels = [], []
    gs = cfg.continuous_group_size
    for k in range(cfg.n_continuous // gs):
        groups.append(np.arange(k * gs, (k + 1) * gs))
        labels.append("c%d" % k)
    start = cfg.n_continuous
    for k in range(cfg.n_discrete_groups):
        groups.append(np.arange(start, start + cfg.per_discrete))
        labels.append("d%d" % k)
        start += cfg.per_discrete
    return GroupStructure(groups, p=cfg.p, labels=labels)


def column_names(cfg):
    names = ["c%d" % j for j in range(cfg.n_continuous)]
    first = 1 if cfg.encoding == "drop_first" else 0
    for k in range(cfg.n_discrete_groups):
        names.extend("d%d_L%d" % (k, lev + 1) for lev in range(first, cfg.levels))
    return names


@dataclass
class Truth:
    beta: np.ndarray
    signal_groups: np.ndarray


def generate_truth(cfg, rng, groups):
    n_cg = cfg.n_continuous // cfg.continuous_group_size
    cont = rng.choice(n_cg, size=cfg.s_c, replace=False) if cfg.s_c else np.zeros(0, int)
    disc = n_cg + rng.choice(cfg.n_discrete_groups, size=cfg.s_d, replace=False) if cfg.s_d \
        else np.zeros(0, int)
    signal = np.sort(np.concatenate([cont, disc]).astype(int))
    beta = np.zeros(cfg.p)
    mag = cfg.m * cfg.signal_scale
    for g in signal:
        cols = groups[g]
        signs = rng.choice([-1., 1.], size=cols.size) if cfg.random_signs else np.ones(cols.size)
        beta[cols] = mag * signs
    return Truth(beta=beta, signal_groups=signal)


def generate_design(cfg, seed):
    """
    Design, group structure and true coefficients.

    Continuous columns are AR(1) Gaussian; each categorical variable is
    uniform on its levels and one-hot encoded.  ``s_c`` continuous and
    ``s_d`` categorical groups carry signal of size ``m`` per coefficient.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    groups = design_groups(cfg)
    truth = generate_truth(cfg, rng, groups)
    X = _draw_X(cfg, cfg.n, rng)
    return X, groups, truth


def generate_response(cfg, X, beta, seed):
    """Draw the response for the configured family at linear predictor ``X beta``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eta = X @ beta
    n = eta.size
    if cfg.response == "gaussian":
        return eta + cfg.sigma * rng.standard_normal(n)
    if cfg.response == "logistic":
        return (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    bad = np.flatnonzero(~(eta < 700))
    if bad.size:
        raise OverflowLossError(bad[0], eta[bad[0]])
    mu = np.exp(eta)
    if cfg.response == "poisson":
        return rng.poisson(mu).astype(float)
    # negative binomial with mean mu and variance phi * mu
    return rng.negative_binomial(mu / (cfg.phi - 1), 1 / cfg.phi).astype(float)


def make_dataset(cfg, X, y):
    return Dataset(y, X, column_names(cfg))


def f1_score(selected_groups, true_groups):
    """Group-level ``TP / (TP + (FP + FN) / 2)``; 1.0 when both sets are empty."""
    sel = set(int(g) for g in selected_groups)
    tru = set(int(g) for g in true_groups)
    if not sel and not tru:
        return 1.0
    tp = len(sel & tru)
    fp = len(sel - tru)
    fn = len(tru - sel)
    return tp / (tp + 0.5 * (fp + fn))


def _draw_columns(cfg, n, rng, cols):
    """
    Rows of the design restricted to the sorted columns ``cols``.  Only the
    needed marginals are simulated, which has the same law as drawing the
    full design and subsetting.
    """
    cols = np.asarray(cols, int)
    nc = cfg.n_continuous
    parts = []
    cc = cols[cols < nc]
    if cc.size:
        S = cfg.rho ** np.abs(cc[:, None] - cc[None, :]).astype(float)
        parts.append(rng.standard_normal((n, cc.size)) @ np.linalg.cholesky(S).T)
    dc = cols[cols >= nc] - nc
    if dc.size:
        per = cfg.per_discrete
        shift = 1 if cfg.encoding == "drop_first" else 0
        var = dc // per
        uniq, inv = np.unique(var, return_inverse=True)
        lev = rng.integers(0, cfg.levels, size=(n, uniq.size))
        parts.append((lev[:, inv] == (dc % per + shift)[None, :]).astype(float))
    return np.hstack(parts)


def oracle_targets(cfg, model, supports, beta, rng):
    """
    Population targets of the refit on each support in ``supports``,
    approximated by refits on one independent sample of
    ``n_oracle_factor * n`` rows from the same process.

    Returns a dict keyed by ``tuple(E)``; failed refits map to the exception.
    """
    N = cfg.n_oracle_factor * cfg.n
    signal = np.flatnonzero(beta)
    cols = np.unique(np.concatenate([signal] + [np.asarray(E, int) for E in supports]))
    X = _draw_columns(cfg, N, rng, cols)
    y = generate_response(cfg, X, beta[cols], rng)
    ds = Dataset(y, X)
    out = {}
    for E in supports:
        key = tuple(int(j) for j in E)
        try:
            out[key] = fit_restricted(model, ds, np.searchsorted(cols, E)).beta_E
        except Exception as exc:
            out[key] = exc
    return out


RECORD_FIELDS = ("rep", "method", "status", "n_groups", "n_coef", "f1", "n_covered", "coverage",
                 "mean_length", "selected_groups", "error")


def _rep_streams(master_seed, rep):
    ss = np.random.SeedSequence([master_seed, rep])
    return [np.random.default_rng(s) for s in ss.spawn(5)]


def run_replication(cfg, rep):
    """
    One replication: returns a list of per-method records (dicts) and a
    dict of timings.
    """
    r_design, r_resp, r_rand, r_split, r_oracle = _rep_streams(cfg.master_seed, rep)
    model = LossModel(LOSS_FOR[cfg.response])
    X, groups, truth = generate_design(cfg, r_design)
    y = generate_response(cfg, X, truth.beta, r_resp)
    ds = make_dataset(cfg, X, y)
    records, timings = [], {}
    try:
        penalty = default_lambda(ds, groups, cfg.base_lambda)
    except Exception as exc:
        for method in METHODS:
            records.append(_failure(rep, method, exc))
        return records, timings
    plan = SplitPlan.draw(cfg.n, cfg.r, r_split)
    runners = {
        "post_gl": lambda: post_gl_inference(model, ds, groups, penalty, f=cfg.randomization_scale,
                                             alpha=cfg.alpha, seed=r_rand,
                                             barrier_c=cfg.barrier_c).report,
        "split": lambda: data_splitting_inference(model, ds, groups, penalty, plan, cfg.alpha),
        "naive": lambda: naive_inference(model, ds, groups, penalty, cfg.alpha),
    }
    pending = []
    for method in METHODS:
        t0 = time.perf_counter()
        try:
            rep_obj = runners[method]()
        except Exception as exc:
            logger.info("replication %d, %s failed: %s", rep, method, exc)
            records.append(_failure(rep, method, exc))
            timings[method] = time.perf_counter() - t0
            continue
        timings[method] = time.perf_counter() - t0
        sel_groups = [groups.labels.index(lab) for lab in rep_obj.selected_groups]
        f1 = f1_score(sel_groups, truth.signal_groups)
        rec = {"rep": rep, "method": method, "status": rep_obj.status, "n_groups": len(sel_groups),
               "n_coef": len(rep_obj.coefficients), "f1": f1, "n_covered": 0, "coverage": "",
               "mean_length": "", "selected_groups": " ".join(rep_obj.selected_groups), "error": ""}
        if not rep_obj.empty:
            pending.append((rec, groups.columns(sorted(sel_groups)), rep_obj.intervals))
        records.append(rec)
    if pending:
        supports = list({tuple(E.tolist()): E for _, E, _ in pending}.values())
        t0 = time.perf_counter()
        targets = oracle_targets(cfg, model, supports, truth.beta, r_oracle)
        timings["oracle"] = time.perf_counter() - t0
        for rec, E, ci in pending:
            target = targets[tuple(E.tolist())]
            if isinstance(target, Exception):
                rec["status"] = "oracle_failed"
                rec["error"] = _short(target)
                continue
            covered = (ci[:, 0] <= target) & (target <= ci[:, 1])
            rec["n_covered"] = int(covered.sum())
            rec["coverage"] = float(covered.mean())
            rec["mean_length"] = float(np.mean(ci[:, 1] - ci[:, 0]))
    return records, timings


def _short(exc):
    return ("%s: %s" % (type(exc).__name__, exc)).replace("\n", " ")[:200]


def _failure(rep, method, exc):
    return {"rep": rep, "method": method, "status": "error", "n_groups": 0, "n_coef": 0, "f1": "",
            "n_covered": 0, "coverage": "", "mean_length": "", "selected_groups": "",
            "error": _short(exc)}


def _worker(args):
    cfg_dict, rep = args
    cfg = SimConfig.from_dict(cfg_dict)
    return run_replication(cfg, rep)


def _n_workers(cfg):
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return 1


@dataclass
class SimResult:
    """Per-replication records (the source of truth) and their aggregates."""
    config: SimConfig
    records: list
    timings: list = field(default_factory=list)

    def aggregates(self):
        return aggregate(self.records)

    def records_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RECORD_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for rec in self.records:
            w.writerow({k: _fmt(rec.get(k, "")) for k in RECORD_FIELDS})
        return buf.getvalue()

    def aggregates_json(self):
        return json.dumps({"config": self.config.to_dict(), "aggregates": self.aggregates()},
                          indent=2, sort_keys=True)

    def summary_table(self):
        agg = self.aggregates()
        lines = ["n=%d  response=%s  reps=%d" % (self.config.n, self.config.response, self.config.reps),
                 "%-8s %10s %10s %10s %10s %8s %8s" % ("method", "coverage", "med.cov", "F1",
                                                       "length", "ok", "failed")]
        for method in METHODS:
            a = agg.get(method)
            if a is None:
                continue
            lines.append("%-8s %10.3f %10.3f %10.3f %10.3f %8d %8d" % (
                method, a["coverage"], a["median_rep_coverage"], a["f1"], a["mean_length"],
                a["n_ok"], a["n_failed"]))
        return "\n".join(lines) + "\n"

    def write(self, outdir):
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "records.csv"), "w", newline="") as fh:
            fh.write(self.records_csv())
        with open(os.path.join(outdir, "aggregates.json"), "w") as fh:
            fh.write(self.aggregates_json())
        with open(os.path.join(outdir, "summary.txt"), "w") as fh:
            fh.write(self.summary_table())
        with open(os.path.join(outdir, "timings.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("rep",) + METHODS + ("oracle",))
            for rep, t in enumerate(self.timings):
                w.writerow([rep] + ["%.4f" % t.get(m, float("nan")) for m in METHODS + ("oracle",)])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_records_csv(text):
    """Parse a records CSV back into record dicts, for recomputing aggregates."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        rec = dict(row)
        for k in ("rep", "n_groups", "n_coef", "n_covered"):
            rec[k] = int(rec[k])
        rec["f1"] = float(rec["f1"]) if rec["f1"] != "" else ""
        for k in ("coverage", "mean_length"):
            rec[k] = float(rec[k]) if rec[k] != "" else ""
        out.append(rec)
    return out


def _nanmean(xs):
    return float(np.mean(xs)) if len(xs) else float("nan")


def aggregate(records):
    """
    Per-method summaries: pooled per-interval coverage, mean and median of
    per-replication coverage, mean F1 over replications without errors,
    mean interval length pooled over intervals, and failure counts.

    Everything is computed from the record fields alone, so the aggregates
    can be rebuilt from the records CSV.
    """
    out = {}
    for method in METHODS:
        recs = [r for r in records if r["method"] == method]
        if not recs:
            continue
        ok = [r for r in recs if r["status"] in ("ok", "nothing selected")]
        with_ci = [r for r in ok if r["status"] == "ok" and r.get("coverage", "") != ""]
        n_int = sum(r["n_coef"] for r in with_ci)
        rep_len = [r["mean_length"] for r in with_ci]
        rep_cov = [r["coverage"] for r in with_ci]
        out[method] = {
            "coverage": sum(r["n_covered"] for r in with_ci) / n_int if n_int else float("nan"),
            "mean_rep_coverage": _nanmean(rep_cov),
            "median_rep_coverage": float(np.median(rep_cov)) if rep_cov else float("nan"),
            "f1": _nanmean([r["f1"] for r in ok]),
            "mean_length": (sum(r["mean_length"] * r["n_coef"] for r in with_ci) / n_int
                            if n_int else float("nan")),
            "median_rep_length": float(np.median(rep_len)) if rep_len else float("nan"),
            "n_intervals": n_int,
            "n_ok": len(ok),
            "n_empty": sum(r["status"] == "nothing selected" for r in ok),
            "n_failed": len(recs) - len(ok),
        }
    return out


def run_study(cfg, progress=None):
    """
    Run ``cfg.reps`` replications, in parallel over processes when more than
    one worker is configured, and collect the records in replication order.
    """
    reps = range(cfg.reps)
    nw = _n_workers(cfg)
    if nw > 1:
        import multiprocessing as mp
        ctx = mp.get_context("spawn")
        cfg_dict = asdict(cfg)
        with ctx.Pool(nw) as pool:
            results = pool.map(_worker, [(cfg_dict, r) for r in reps], chunksize=max(1, cfg.reps // (4 * nw)))
    else:
        results = []
        for r in reps:
            results.append(run_replication(cfg, r))
            if progress:
                progress(r)
    records = [rec for recs, _ in results for rec in recs]
    timings = [t for _, t in results]
    failed = sum(1 for rec in records if rec["status"] not in ("ok", "nothing selected"))
    if failed:
        logger.warning("%d method-replications failed and are excluded from aggregates", failed)
    return SimResult(config=cfg, records=records, timings=timings)
