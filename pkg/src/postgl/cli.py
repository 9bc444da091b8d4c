"""
Command-line interface.

``postgl analyze``   inference on a CSV dataset
``postgl simulate``  run a simulation study from a JSON config
``postgl selftest``  fast invariant checks

Exit status: 0 on success, 1 for usage, configuration or data errors, 2 for
numerical failures.
"""

import argparse
from dataclasses import asdict, dataclass, field, fields
import json
import logging
import os
import sys
import time

import numpy as np

from .baselines import SplitPlan, data_splitting_inference, naive_inference
from .glasso import Penalty, SolverConvergenceError, default_lambda, draw_randomization
from .model import Dataset, GroupStructure, LossModel, ModelError
from .pipeline import pilot_hessian, post_gl_inference
from .simulation import THREADS_ENV, ConfigError, SimConfig, run_study

logger = logging.getLogger(__name__)

METHOD_CHOICES = ("post_gl", "split", "naive", "all")
INTERCEPT = "(intercept)"
CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")


class UsageError(Exception):
    pass


@dataclass
class AnalysisConfig:
    """
    Settings for ``analyze``.

    ``categorical`` lists columns to one-hot encode; each becomes one
    group.  ``group_spec`` maps other columns to group labels; unlisted
    columns are singleton groups.  ``f`` and ``omega_path`` are
    alternatives; ``omega_path`` names a CSV with the full randomization
    covariance over the encoded columns (intercept first when present).
    """
    data_path: str
    response_column: str
    categorical: list = field(default_factory=list)
    group_spec: dict = field(default_factory=dict)
    model: str = "logistic"
    base_lambda: float = 0.5
    f: float = None
    omega_path: str = None
    alpha: float = 0.1
    seed: int = 0
    method: str = "all"
    split_r: float = 0.9
    encoding: str = "drop_first"
    standardize: bool = True
    intercept: bool = True
    barrier_c: float = 0.0

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("%s: unknown field" % unknown[0])
        for req in ("data_path", "response_column"):
            if req not in d:
                raise ConfigError("%s: required field missing" % req)
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.method not in METHOD_CHOICES:
            raise ConfigError("method: expected one of %s (got %r)" % (METHOD_CHOICES, self.method))
        if self.encoding not in ("drop_first", "full"):
            raise ConfigError("encoding: expected 'drop_first' or 'full' (got %r)" % self.encoding)
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha: must lie in (0, 1) (got %r)" % self.alpha)
        if not 0 < self.split_r < 1:
            raise ConfigError("split_r: must lie in (0, 1) (got %r)" % self.split_r)
        if self.base_lambda <= 0:
            raise ConfigError("base_lambda: must be positive (got %r)" % self.base_lambda)
        if self.f is not None and self.f <= 0:
            raise ConfigError("f: must be positive (got %r)" % self.f)
        if self.f is not None and self.omega_path is not None:
            raise ConfigError("f: give either f or omega_path, not both")
        try:
            LossModel(self.model)
        except ModelError as exc:
            raise ConfigError("model: %s" % exc) from None

    @property
    def randomization_scale(self):
        return (1 - self.split_r) / self.split_r if self.f is None else self.f


@dataclass
class EncodedData:
    dataset: Dataset
    groups: GroupStructure
    standardization: dict
    levels: dict


def encode_frame(frame, cfg):
    """
    Design matrix from a data frame: drop-first (or full) one-hot encoding
    of the categorical columns with levels in sorted order, standardized
    continuous columns, and an optional intercept.
    """
    missing = [c for c in [cfg.response_column] + list(cfg.categorical) + list(cfg.group_spec)
               if c not in frame.columns]
    if missing:
        raise ConfigError("unknown columns: %s" % missing)
    na_rows = np.flatnonzero(frame.isna().any(axis=1).to_numpy())
    if na_rows.size:
        raise ModelError("missing values in data rows %s" % na_rows[:20].tolist()
                         + (" and %d more" % (na_rows.size - 20) if na_rows.size > 20 else ""))
    y = frame[cfg.response_column].to_numpy(dtype=float)
    cols, names, labels = [], [], []
    std, levels = {}, {}
    if cfg.intercept:
        cols.append(np.ones(len(frame)))
        names.append(INTERCEPT)
        labels.append(INTERCEPT)
    for c in frame.columns:
        if c == cfg.response_column:
            continue
        if c in cfg.categorical:
            levs = sorted(frame[c].astype(str).unique())
            levels[c] = levs
            vals = frame[c].astype(str).to_numpy()
            use = levs[1:] if cfg.encoding == "drop_first" else levs
            for lev in use:
                cols.append((vals == lev).astype(float))
                names.append("%s[%s]" % (c, lev))
                labels.append(c)
        else:
            try:
                x = frame[c].to_numpy(dtype=float)
            except (TypeError, ValueError):
                raise ConfigError("%s: non-numeric column; declare it in 'categorical'" % c) from None
            if cfg.standardize:
                mu, sd = float(x.mean()), float(x.std(ddof=1))
                if not sd > 0:
                    raise ModelError("column %s is constant" % c)
                x = (x - mu) / sd
                std[c] = [mu, sd]
            cols.append(x)
            names.append(c)
            labels.append(cfg.group_spec.get(c, c))
    X = np.column_stack(cols)
    groups = GroupStructure.from_labels(labels)
    # reorder columns so that each group is contiguous, in order of first appearance
    order = np.concatenate(groups.groups)
    X = X[:, order]
    names = [names[j] for j in order]
    groups = GroupStructure.from_labels([labels[j] for j in order])
    return EncodedData(Dataset(y, X, names), groups, std, levels)


def make_penalty(ds, groups, base_lambda, intercept):
    """Default weights, with the intercept group (if any) left unpenalized."""
    if not intercept:
        return default_lambda(ds, groups, base_lambda)
    k0 = groups.labels.index(INTERCEPT)
    keep = [k for k in range(len(groups)) if k != k0]
    sizes = groups.sizes[keep]
    var_y = np.var(ds.y, ddof=1)
    if not var_y > 0:
        raise ModelError("response has zero variance")
    p_pen = ds.p - groups[k0].size
    unscaled = base_lambda * np.sqrt(sizes / sizes.mean() * ds.n * var_y * 2 * np.log(max(p_pen, 2)))
    lam = np.zeros(len(groups))
    lam[keep] = unscaled / np.sqrt(ds.n)
    return Penalty(lam, n=ds.n, allow_zero=True)


def run_analysis(cfg, out_dir=None):
    """Run the configured methods; returns a dict of reports keyed by method."""
    import pandas as pd
    try:
        frame = pd.read_csv(cfg.data_path)
    except FileNotFoundError:
        raise ConfigError("data_path: file not found: %s" % cfg.data_path) from None
    enc = encode_frame(frame, cfg)
    ds, groups = enc.dataset, enc.groups
    model = LossModel(cfg.model)
    model.check_response(ds.y)
    penalty = make_penalty(ds, groups, cfg.base_lambda, cfg.intercept)
    ss = np.random.SeedSequence(cfg.seed)
    r_rand, r_split = [np.random.default_rng(s) for s in ss.spawn(2)]
    methods = ("post_gl", "split", "naive") if cfg.method == "all" else (cfg.method,)
    common = {"config": asdict(cfg), "standardization": enc.standardization, "levels": enc.levels,
              "seed": cfg.seed}
    reports = {}
    for method in methods:
        if method == "post_gl":
            if cfg.omega_path:
                Omega = np.loadtxt(cfg.omega_path, delimiter=",", ndmin=2)
                if Omega.shape != (ds.p, ds.p):
                    raise ConfigError("omega_path: expected a %dx%d matrix, got %s" % (ds.p, ds.p, Omega.shape))
                rand = draw_randomization("explicit", 1.0, None, r_rand, ds.n, Omega=Omega)
            else:
                rand = draw_randomization("scaled_H", cfg.randomization_scale, pilot_hessian(model, ds),
                                          r_rand, ds.n)
            rep = post_gl_inference(model, ds, groups, penalty, alpha=cfg.alpha, rand=rand,
                                    barrier_c=cfg.barrier_c).report
        elif method == "split":
            plan = SplitPlan.draw(ds.n, cfg.split_r, r_split)
            rep = data_splitting_inference(model, ds, groups, penalty, plan, cfg.alpha)
        else:
            rep = naive_inference(model, ds, groups, penalty, cfg.alpha)
        rep.seed = cfg.seed
        rep.provenance.update(common)
        reports[method] = rep
        if out_dir:
            write_report(rep, out_dir)
    return reports


def write_report(rep, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, rep.method)
    with open(base + "_coefficients.csv", "w", newline="") as fh:
        fh.write(rep.coefficients_csv())
    with open(base + "_groups.csv", "w", newline="") as fh:
        fh.write(rep.groups_csv())
    with open(base + ".json", "w") as fh:
        fh.write(rep.to_json(indent=2, sort_keys=True))


def resolve_config_path(path):
    if os.path.exists(path):
        return path
    bundled = os.path.join(CONFIG_DIR, os.path.basename(path))
    if os.path.exists(bundled):
        return bundled
    raise ConfigError("config: file not found: %s" % path)


def load_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("config: invalid JSON (%s)" % exc) from None


def cmd_analyze(args):
    if args.config:
        d = load_json(resolve_config_path(args.config))
    else:
        d = {}
    for name in ("data_path", "response_column", "model", "base_lambda", "f", "omega_path", "alpha",
                 "seed", "method", "split_r", "encoding", "barrier_c"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if args.categorical:
        d["categorical"] = [c for c in args.categorical.split(",") if c]
    if args.no_standardize:
        d["standardize"] = False
    if args.no_intercept:
        d["intercept"] = False
    cfg = AnalysisConfig.from_dict(d)
    reports = run_analysis(cfg, args.out)
    for method, rep in reports.items():
        print("%s: %s, selected %s" % (method, rep.status, ", ".join(rep.selected_groups) or "-"))
    return 0


def cmd_simulate(args):
    d = load_json(resolve_config_path(args.config))
    if args.reps is not None:
        d["reps"] = args.reps
    if args.workers is not None:
        d["workers"] = args.workers
    cfg = SimConfig.from_dict(d)
    t0 = time.perf_counter()
    res = run_study(cfg)
    res.write(args.out)
    sys.stdout.write(res.summary_table())
    logger.info("simulation finished in %.1f s", time.perf_counter() - t0)
    return 0


def cmd_selftest(args):
    from .checks import run_all
    t0 = time.perf_counter()
    results = run_all(seed=args.seed, inject_negative_lambda=args.inject_fault == "negative-lambda")
    failed = 0
    for name, ok, detail in results:
        print("[%s] %s: %s" % ("PASS" if ok else "FAIL", name, detail))
        failed += not ok
    print("%d/%d checks passed in %.1f s" % (len(results) - failed, len(results), time.perf_counter() - t0))
    return 0 if failed == 0 else 2


def build_parser():
    p = argparse.ArgumentParser(prog="postgl", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="selective inference on a CSV dataset")
    a.add_argument("--config", help="JSON analysis config; flags override its fields")
    a.add_argument("--data", dest="data_path")
    a.add_argument("--response", dest="response_column")
    a.add_argument("--categorical", help="comma-separated categorical columns")
    a.add_argument("--model", choices=("gaussian", "logistic", "poisson", "quasi_poisson"))
    a.add_argument("--base-lambda", dest="base_lambda", type=float)
    a.add_argument("--f", type=float)
    a.add_argument("--omega", dest="omega_path")
    a.add_argument("--alpha", type=float)
    a.add_argument("--seed", type=int)
    a.add_argument("--method", choices=METHOD_CHOICES)
    a.add_argument("--split-r", dest="split_r", type=float)
    a.add_argument("--encoding", choices=("drop_first", "full"))
    a.add_argument("--barrier-c", dest="barrier_c", type=float)
    a.add_argument("--no-standardize", action="store_true")
    a.add_argument("--no-intercept", action="store_true")
    a.add_argument("--out", default="postgl_out")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("config", help="JSON config path, or the name of a bundled config")
    s.add_argument("--out", default="postgl_sim")
    s.add_argument("--reps", type=int)
    s.add_argument("--workers", type=int, help="worker processes (default: $%s or 1)" % THREADS_ENV)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("selftest", help="fast invariant checks")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--inject-fault", choices=("negative-lambda",), help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (np.linalg.LinAlgError, ArithmeticError, SolverConvergenceError, RuntimeError) as exc:
        # LinAlgError derives from ValueError, so this must come first
        print("numerical failure: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 2
    except (ConfigError, ModelError, UsageError, ValueError, KeyError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
