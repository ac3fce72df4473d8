"""ROC AUC, average-precision AUPR, curve export, and run aggregation.

Scores are majority-oriented: higher means more majority-like. For the
minority class as positive the scores are negated. Metrics are stored in
[0, 1] and rendered in percent.
"""
from __future__ import annotations

import io
import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

METRICS = ("auc", "aupr_maj", "aupr_min")
STD_FLAVOR = "population"


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    is_majority: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.is_majority).astype(bool)
        if s.ndim != 1 or s.shape != y.shape:
            raise ValueError(f"scores and flags must be 1-D and equal length, got {s.shape} and {y.shape}")
        if not np.isfinite(s).all():
            raise ValueError("scores must be finite")
        if y.all() or not y.any():
            raise ValueError("need at least one majority and one minority sample")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "is_majority", y)


def auc(ls: LabeledScores) -> float:
    """Mann-Whitney estimate of P(majority score > minority score), ties count half."""
    ranks = rankdata(ls.scores)  # average ranks for ties
    n_pos = int(ls.is_majority.sum())
    n_neg = len(ls.scores) - n_pos
    u = ranks[ls.is_majority].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _ranking(ls: LabeledScores, positive: str):
    if positive == "majority":
        return ls.scores, ls.is_majority
    if positive == "minority":
        return -ls.scores, ~ls.is_majority
    raise ValueError(f"positive must be 'majority' or 'minority', got {positive!r}")


def pr_curve(ls: LabeledScores, positive: str = "majority"):
    """Precision and recall at every distinct threshold, descending score.

    Returns ``(thresholds, precision, recall)`` in the orientation of
    ``positive`` (thresholds are negated scores when the minority is positive).
    """
    s, y = _ranking(ls, positive)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp / (tp + fp), tp / y.sum()


def aupr(ls: LabeledScores, positive: str = "majority") -> float:
    """Average precision: sum over thresholds of (R_k - R_{k-1}) * P_k, no interpolation."""
    _, precision, recall = pr_curve(ls, positive)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_curve(ls: LabeledScores):
    """Majority-positive ROC points ``(thresholds, fpr, tpr)``, starting at (0, 0)."""
    order = np.argsort(-ls.scores, kind="mergesort")
    s, y = ls.scores[order], ls.is_majority[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    thresholds = np.r_[np.inf, s[last]]
    return thresholds, np.r_[0.0, fp / (~y).sum()], np.r_[0.0, tp / y.sum()]


@dataclass(frozen=True)
class RunMetrics:
    auc: float
    aupr_maj: float
    aupr_min: float


def evaluate_scores(ls: LabeledScores) -> RunMetrics:
    return RunMetrics(auc(ls), aupr(ls, "majority"), aupr(ls, "minority"))


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one value")
    return float(v.mean()), float(v.std(ddof=0))


@dataclass
class EvalReport:
    per_run: dict = field(default_factory=dict)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    runs: int = 0
    std_flavor: str = STD_FLAVOR

    @property
    def auc(self) -> float:
        return self.mean["auc"]

    @property
    def aupr_maj(self) -> float:
        return self.mean["aupr_maj"]

    @property
    def aupr_min(self) -> float:
        return self.mean["aupr_min"]

    def formatted(self, metric: str, digits: int = 1) -> str:
        """Percent ``mean±std`` string, e.g. ``78.4±0.9``."""
        return f"{100 * self.mean[metric]:.{digits}f}±{100 * self.std[metric]:.{digits}f}"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def aggregate_runs(reports) -> EvalReport:
    """Pool per-run metrics into mean and population std; per-run values are kept."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one run")
    out = EvalReport(runs=len(reports))
    for m in METRICS:
        vals = [float(getattr(r, m)) for r in reports]
        out.per_run[m] = vals
        out.mean[m], out.std[m] = mean_std(vals)
    return out


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def roc_csv(ls: LabeledScores) -> str:
    t, fpr, tpr = roc_curve(ls)
    return _csv(["threshold", "fpr", "tpr"], [(repr(float(a)), repr(float(b)), repr(float(c))) for a, b, c in zip(t, fpr, tpr)])


def pr_csv(ls: LabeledScores) -> str:
    rows = []
    for positive in ("majority", "minority"):
        t, p, r = pr_curve(ls, positive)
        if positive == "minority":
            t = -t
        rows += [(positive, repr(float(a)), repr(float(b)), repr(float(c))) for a, b, c in zip(t, p, r)]
    return _csv(["positive", "threshold", "precision", "recall"], rows)
