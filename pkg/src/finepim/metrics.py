"""Confusion matrices and one-vs-rest classification metrics.

Rows of a confusion matrix are true classes, columns predicted classes. A
metric whose denominator is zero is undefined and reported as ``None``;
macro averages skip undefined entries.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError

METRICS = ("sensitivity", "specificity", "precision", "f1")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0)):
            raise ValueError("confusion counts must be nonnegative integers")
        self.counts = c.astype(np.int64)

    @classmethod
    def from_predictions(cls, truth, predicted, num_classes: int) -> "ConfusionMatrix":
        t = np.asarray(truth, dtype=np.intp)
        p = np.asarray(predicted, dtype=np.intp)
        if t.shape != p.shape:
            raise ValueError("truth and predictions differ in length")
        if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (t, p), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, k: int) -> tuple[int, int, int, int]:
        """``(TP, FP, FN, TN)`` for class ``k``."""
        c = self.counts
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn

    def to_csv(self, class_names=None) -> str:
        names = list(class_names) if class_names else [str(i) for i in range(len(self.counts))]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\predicted"] + names)
        for name, row in zip(names, self.counts):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def class_metrics(cm: ConfusionMatrix, k: int) -> dict[str, float | None]:
    tp, fp, fn, tn = cm.one_vs_rest(k)
    return {
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "precision": _ratio(tp, tp + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list[dict[str, float | None]]
    macro: dict[str, float | None]
    confusion: ConfusionMatrix
    class_names: list[str]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "total": self.confusion.total,
            "per_class": {n: m for n, m in zip(self.class_names, self.per_class)},
            "macro": self.macro,
            "confusion": self.confusion.counts.tolist(),
            "classes": self.class_names,
        }


def metrics_report(cm: ConfusionMatrix, class_names=None) -> MetricsReport:
    if cm.total == 0:
        raise DataError("cannot score an empty split")
    k = len(cm.counts)
    names = list(class_names) if class_names else [str(i) for i in range(k)]
    per = [class_metrics(cm, i) for i in range(k)]
    macro = {m: _mean_defined(p[m] for p in per) for m in METRICS}
    return MetricsReport(float(np.trace(cm.counts)) / cm.total, per, macro, cm, names)


def evaluate_predictions(truth, predicted, num_classes: int, class_names=None) -> MetricsReport:
    return metrics_report(ConfusionMatrix.from_predictions(truth, predicted, num_classes), class_names)


def format_report(report: MetricsReport) -> str:
    """Fixed-width text table of per-class and macro metrics."""
    fmt = lambda v: "   -  " if v is None else f"{v:6.3f}"  # noqa: E731
    width = max(8, max(len(n) for n in report.class_names))
    lines = [f"accuracy {report.accuracy:.4f} over {report.confusion.total} images",
             f"{'class':<{width}} " + " ".join(f"{m[:6]:>6}" for m in METRICS)]
    for name, row in zip(report.class_names, report.per_class):
        lines.append(f"{name:<{width}} " + " ".join(fmt(row[m]) for m in METRICS))
    lines.append(f"{'macro':<{width}} " + " ".join(fmt(report.macro[m]) for m in METRICS))
    return "\n".join(lines)
