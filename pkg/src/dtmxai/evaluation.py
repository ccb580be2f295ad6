"""Cross-validation folds, classification metrics and confidence intervals.

Scores are predicted probabilities of the *unfavorable* outcome (``p1``),
which is the positive class throughout.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .dtm import UNFAVORABLE, encode_labels
from .errors import (DTMError, InstabilityError, StratificationError, UndefinedMetricError)

Z95 = 1.959964


# --------------------------------------------------------------------------
# Folds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    k: int
    seed: int

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)


def stratified_kfold(labels, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Assign each sample to one of ``k`` folds, dealing each class round-robin.

    Every class is shuffled with a seeded generator and dealt to folds
    cyclically; the starting fold of each class continues where the previous
    class stopped so fold sizes differ by at most one.
    """
    y = encode_labels(labels)
    if k < 2:
        raise StratificationError("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    start = 0
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if len(idx) < k:
            raise StratificationError(
                f"class {cls} has {len(idx)} samples, fewer than k={k} folds")
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (start + np.arange(len(idx))) % k
        start = (start + len(idx)) % k
    return FoldAssignment(folds, k, seed)


# --------------------------------------------------------------------------
# Point metrics
# --------------------------------------------------------------------------


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = encode_labels(labels).reshape(-1)
    if len(s) != len(y):
        raise DTMError("scores and labels differ in length")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (unfavorable, favorable) pairs ranked correctly, ties 0.5."""
    s, y = _scores_labels(scores, labels)
    pos = y == UNFAVORABLE
    n1 = int(pos.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC needs both outcome classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else float("nan")

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else float("nan")


def confusion(predicted, labels) -> Confusion:
    p = encode_labels(predicted).reshape(-1)
    y = encode_labels(labels).reshape(-1)
    if len(p) == 0 or len(p) != len(y):
        raise DTMError("confusion needs equally many predictions and labels (> 0)")
    pos, hit = y == UNFAVORABLE, p == UNFAVORABLE
    return Confusion(int((pos & hit).sum()), int((~pos & hit).sum()),
                     int((pos & ~hit).sum()), int((~pos & ~hit).sum()))


def confusion_metrics(predicted, labels) -> dict:
    c = confusion(predicted, labels)
    return {"sensitivity": c.sensitivity, "specificity": c.specificity,
            "accuracy": c.accuracy, "f1": c.f1}


def f1_score(predicted, labels) -> float:
    return confusion(predicted, labels).f1


def nll_p1(p1, labels) -> float:
    """Mean NLL from unfavorable probabilities, clamped at 1e-12."""
    p, y = _scores_labels(p1, labels)
    if len(p) == 0:
        raise DTMError("nll needs at least one sample")
    lik = np.where(y == UNFAVORABLE, p, 1.0 - p)
    return float(-np.mean(np.log(np.maximum(lik, 1e-12))))


# --------------------------------------------------------------------------
# Confidence intervals
# --------------------------------------------------------------------------


def wilson_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, clipped to [0, 1]."""
    if n <= 0:
        raise DTMError("Wilson interval needs n > 0")
    if not 0 <= successes <= n:
        raise DTMError(f"successes must lie in [0, {n}], got {successes}")
    if level == 0.95:
        z = Z95
    else:
        from scipy.stats import norm

        z = float(norm.ppf(0.5 + level / 2))
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def _metric_value(metric, s, y):
    try:
        v = float(metric(s, y))
    except UndefinedMetricError:
        return float("nan")
    return v


def bootstrap_ci(metric: Callable, scores, labels, B: int = 2000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile interval of ``metric`` over ``B`` seeded paired resamples.

    Resamples containing a single class are redrawn. When the metric is
    undefined (or the redraw budget is spent) on more than 10% of ``B``
    attempts, an instability error is raised.
    """
    if B < 100:
        raise DTMError("bootstrap needs B >= 100")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = encode_labels(labels).reshape(-1)
    n = len(y)
    if n == 0 or len(s) != n:
        raise DTMError("bootstrap needs equally many scores and labels (> 0)")
    if len(np.unique(y)) < 2:
        raise InstabilityError("bootstrap needs both outcome classes")
    rng = np.random.default_rng(seed)
    values = np.empty(B)
    failures = 0
    budget = 0.1 * B
    i = 0
    while i < B:
        idx = rng.integers(0, n, size=n)
        yy = y[idx]
        if yy.min() == yy.max():
            failures += 1
        else:
            v = _metric_value(metric, s[idx], yy)
            if np.isfinite(v):
                values[i] = v
                i += 1
                continue
            failures += 1
        if failures > budget:
            raise InstabilityError(
                f"metric undefined on more than 10% of {B} bootstrap resamples")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# Threshold selection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdRule:
    """Predict unfavorable when ``p1 > threshold``."""

    threshold: float
    geometric_mean: float
    source_fold: int | None = None

    def apply(self, p1) -> np.ndarray:
        return (np.asarray(p1, dtype=np.float64) > self.threshold).astype(np.int64)


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0], mids, [1.0]]))


def _rates(scores, y, thresholds):
    """TPR and TNR of the rule ``p1 > t`` for every threshold, via sorted counts."""
    pos = np.sort(scores[y == UNFAVORABLE])
    neg = np.sort(scores[y != UNFAVORABLE])
    tpr = 1.0 - np.searchsorted(pos, thresholds, side="right") / len(pos)
    tnr = np.searchsorted(neg, thresholds, side="right") / len(neg)
    return tpr, tnr


def select_threshold(p1, labels, source_fold: int | None = None) -> ThresholdRule:
    """Threshold on ``p1`` maximizing ``sqrt(TPR * TNR)`` on validation data.

    Candidates are the midpoints between consecutive distinct scores plus 0
    and 1. Ties in the geometric mean go to the candidate with the higher
    validation accuracy, then to the smallest threshold.
    """
    s, y = _scores_labels(p1, labels)
    n1 = int((y == UNFAVORABLE).sum())
    if n1 == 0 or n1 == len(y):
        raise UndefinedMetricError("threshold selection needs both classes in validation")
    cand = threshold_candidates(s)
    tpr, tnr = _rates(s, y, cand)
    gm = np.sqrt(tpr * tnr)
    acc = (tpr * n1 + tnr * (len(y) - n1)) / len(y)
    # lexsort: last key is primary
    order = np.lexsort((cand, -acc, -gm))
    best = order[0]
    return ThresholdRule(float(cand[best]), float(gm[best]), source_fold)


# --------------------------------------------------------------------------
# Metrics table
# --------------------------------------------------------------------------

METRIC_NAMES = ("nll", "auc", "specificity", "sensitivity", "accuracy", "f1")
_METRIC_LABELS = {"nll": "NLL", "auc": "AUC", "specificity": "Specificity",
                  "sensitivity": "Sensitivity", "accuracy": "Accuracy", "f1": "F1-score"}


@dataclass(frozen=True)
class MetricValue:
    estimate: float
    low: float
    high: float

    def cell(self, digits: int = 3) -> str:
        return f"{self.estimate:.{digits}f} [{self.low:.{digits}f}, {self.high:.{digits}f}]"


def pooled_metrics(p1, predicted, labels, B: int = 2000, seed: int = 0) -> dict[str, MetricValue]:
    """Point estimates with Wilson (proportions) and bootstrap (NLL, AUC, F1) intervals."""
    p1 = np.asarray(p1, dtype=np.float64)
    pred = encode_labels(predicted)
    y = encode_labels(labels)
    c = confusion(pred, y)
    out = {}
    for name, metric in (("nll", nll_p1), ("auc", auc)):
        est = metric(p1, y)
        lo, hi = bootstrap_ci(metric, p1, y, B, seed)
        out[name] = MetricValue(est, lo, hi)
    out["specificity"] = MetricValue(c.specificity, *wilson_ci(c.tn, c.tn + c.fp))
    out["sensitivity"] = MetricValue(c.sensitivity, *wilson_ci(c.tp, c.tp + c.fn))
    out["accuracy"] = MetricValue(c.accuracy, *wilson_ci(c.tp + c.tn, c.n))
    # bootstrap F1 over (prediction, label) pairs
    lo, hi = bootstrap_ci(lambda p, yy: f1_score(p.astype(np.int64), yy), pred, y, B, seed)
    out["f1"] = MetricValue(c.f1, lo, hi)
    return out


@dataclass
class MetricsTable:
    """Rows are metrics, columns are model variants."""

    columns: dict[str, dict[str, MetricValue]] = field(default_factory=dict)

    def add(self, variant: str, metrics: dict[str, MetricValue]) -> None:
        self.columns[variant] = metrics

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "metric", "estimate", "ci_low", "ci_high"])
        for variant, metrics in self.columns.items():
            for name in METRIC_NAMES:
                m = metrics[name]
                w.writerow([variant, name, repr(m.estimate), repr(m.low), repr(m.high)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "MetricsTable":
        table = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                col = table.columns.setdefault(rec["variant"], {})
                col[rec["metric"]] = MetricValue(float(rec["estimate"]), float(rec["ci_low"]),
                                                 float(rec["ci_high"]))
        return table

    def to_text(self, digits: int = 3) -> str:
        variants = list(self.columns)
        rows = [[""] + variants]
        for name in METRIC_NAMES:
            rows.append([_METRIC_LABELS[name]] + [self.columns[v][name].cell(digits)
                                                 for v in variants])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = []
        for r in rows:
            cells = [r[0].ljust(widths[0])] + [c.rjust(wd) for c, wd in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
        return "\n".join(lines) + "\n"
