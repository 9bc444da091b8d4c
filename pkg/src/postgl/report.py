"""Inference reports shared by every method, with CSV and JSON serialization."""

from dataclasses import asdict, dataclass, field
import csv
import io
import json

import numpy as np

COEF_FIELDS = ("name", "group", "estimate", "std_error", "ci_lo", "ci_hi", "p_value")
GROUP_FIELDS = ("group", "chi2", "df", "p_value")


@dataclass
class CoefficientRow:
    name: str
    group: str
    estimate: float
    std_error: float
    ci_lo: float
    ci_hi: float
    p_value: float


@dataclass
class GroupRow:
    group: str
    chi2: float
    df: int
    p_value: float


@dataclass
class InferenceReport:
    """
    Output of one inference method on one dataset.

    ``status`` is ``"ok"`` or ``"nothing selected"``.  ``selection_valid``
    is False for the naive method, whose intervals ignore selection.
    """
    method: str
    status: str
    selection_valid: bool
    alpha: float
    coefficients: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    selected_groups: list = field(default_factory=list)
    selected_columns: list = field(default_factory=list)
    lambda_unscaled: list = field(default_factory=list)
    seed: object = None
    timings: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    # numeric payload for simulations; not serialized
    estimate: np.ndarray = field(default=None, repr=False, compare=False)
    intervals: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def empty(self):
        return self.status != "ok"

    def to_dict(self):
        d = asdict(self)
        d.pop("estimate")
        d.pop("intervals")
        return _plain(d)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["coefficients"] = [CoefficientRow(**r) for r in d.get("coefficients", [])]
        d["groups"] = [GroupRow(**r) for r in d.get("groups", [])]
        rep = cls(**d)
        if rep.coefficients:
            rep.estimate = np.array([r.estimate for r in rep.coefficients])
            rep.intervals = np.array([[r.ci_lo, r.ci_hi] for r in rep.coefficients])
        return rep

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def coefficients_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COEF_FIELDS)
        for r in self.coefficients:
            w.writerow([getattr(r, k) if isinstance(getattr(r, k), str) else repr(float(getattr(r, k)))
                        for k in COEF_FIELDS])
        return buf.getvalue()

    def groups_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GROUP_FIELDS)
        for r in self.groups:
            w.writerow([r.group, repr(float(r.chi2)), int(r.df), repr(float(r.p_value))])
        return buf.getvalue()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def build_report(method, ds, groups, E, active_groups, estimate, cov, alpha, selection_valid,
                 penalty=None, seed=None, timings=None, provenance=None, group_positions=None):
    """Assemble a report from an estimate and its covariance on the selected columns."""
    from .selective import wald_inference
    names = ds.column_names
    wald = wald_inference(estimate, None, alpha, group_positions, cov=cov)
    rows = []
    for j, col in enumerate(E):
        rows.append(CoefficientRow(name=names[col], group=groups.labels[groups.column_group[col]],
                                   estimate=float(wald.mle[j]), std_error=float(wald.se[j]),
                                   ci_lo=float(wald.intervals[j, 0]), ci_hi=float(wald.intervals[j, 1]),
                                   p_value=float(wald.pvalues[j])))
    grows = [GroupRow(group=groups.labels[g], chi2=float(wald.group_stats[i]), df=int(wald.group_df[i]),
                      p_value=float(wald.group_pvalues[i])) for i, g in enumerate(active_groups)]
    return InferenceReport(
        method=method, status="ok", selection_valid=selection_valid, alpha=alpha,
        coefficients=rows, groups=grows,
        selected_groups=[groups.labels[g] for g in active_groups],
        selected_columns=[names[c] for c in E],
        lambda_unscaled=[] if penalty is None else penalty.unscaled.tolist(),
        seed=seed, timings=timings or {}, provenance=provenance or {},
        estimate=wald.mle, intervals=wald.intervals)


def empty_report(method, alpha, selection_valid, penalty=None, seed=None, timings=None, provenance=None):
    return InferenceReport(method=method, status="nothing selected", selection_valid=selection_valid,
                           alpha=alpha, lambda_unscaled=[] if penalty is None else penalty.unscaled.tolist(),
                           seed=seed, timings=timings or {}, provenance=provenance or {},
                           estimate=np.zeros(0), intervals=np.zeros((0, 2)))


def group_positions_for(groups, active_groups):
    """Positions of each active group inside the stacked selected columns."""
    sizes = [groups.groups[g].size for g in active_groups]
    return np.split(np.arange(sum(sizes)), np.cumsum(sizes)[:-1]) if sizes else []
