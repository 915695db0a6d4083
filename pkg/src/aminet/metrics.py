"""Binary classification metrics at a fixed threshold, plus rank-based AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

COLUMNS = ("AUC", "Accuracy", "Precision", "Recall", "F1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    """One evaluation. ``auc`` is None when the labels hold a single class."""

    auc: float | None
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_row(self) -> dict[str, float | None]:
        return dict(zip(COLUMNS, (self.auc, self.accuracy, self.precision, self.recall, self.f1)))

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"{len(s)} scores but {len(y)} labels")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with the strict rule: positive iff score > threshold."""
    s, y = _pair(scores, labels)
    pred = s > threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int((pred & pos).sum()),
        fp=int((pred & ~pos).sum()),
        tn=int((~pred & ~pos).sum()),
        fn=int((~pred & pos).sum()),
    )


def precision_recall_f1(c: ConfusionCounts) -> tuple[float, float, float]:
    """Zero whenever a denominator vanishes."""
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ContractError("accuracy of an empty evaluation")
    return (c.tp + c.tn) / c.total


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with average ranks for ties; None for single-class input."""
    s, y = _pair(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(scores, labels, threshold: float = 0.5) -> MetricReport:
    c = confusion(scores, labels, threshold)
    p, r, f1 = precision_recall_f1(c)
    return MetricReport(auc(scores, labels), accuracy(c), p, r, f1)


def mean_report(reports) -> MetricReport:
    """Column-wise mean; AUC averages only the folds where it is defined."""
    reports = list(reports)
    if not reports:
        raise ContractError("mean of no reports")
    aucs = [r.auc for r in reports if r.auc is not None]
    return MetricReport(
        auc=float(np.mean(aucs)) if aucs else None,
        accuracy=float(np.mean([r.accuracy for r in reports])),
        precision=float(np.mean([r.precision for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        f1=float(np.mean([r.f1 for r in reports])),
    )
