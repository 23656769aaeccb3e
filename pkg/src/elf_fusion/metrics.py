"""Accuracy and quadratically weighted Cohen's kappa over a confusion matrix."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError, ParameterError


class ConfusionMatrix:
    """K x K counts; ``counts[t, p]`` is the number of samples with truth t predicted as p."""

    def __init__(self, num_classes: int = 3, counts=None):
        if counts is not None:
            counts = np.array(counts, dtype=np.int64)
            if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
                raise ParameterError(f"confusion matrix must be square, got shape {counts.shape}")
            if np.any(counts < 0):
                raise ParameterError("confusion matrix counts must be non-negative")
            self.counts = counts
        else:
            if num_classes < 2:
                raise ParameterError(f"need at least 2 classes, got {num_classes}")
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true_label: int, pred_label: int) -> ConfusionMatrix:
        k = self.num_classes
        for name, v in (("true", true_label), ("predicted", pred_label)):
            if not 0 <= int(v) < k:
                raise ParameterError(f"{name} label {v} outside 0..{k - 1}")
        self.counts[int(true_label), int(pred_label)] += 1
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ParameterError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(counts=self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int = 3) -> ConfusionMatrix:
        cm = cls(num_classes)
        for t, p in zip(y_true, y_pred):
            cm.accumulate(t, p)
        return cm


def _counts(cm) -> np.ndarray:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() <= 0:
        raise MetricError("metric undefined on an empty confusion matrix")
    return counts.astype(np.float64)


def accuracy(cm) -> float:
    counts = _counts(cm)
    return float(np.trace(counts) / counts.sum())


def quadratic_weighted_kappa(cm) -> float:
    """1 - sum(w*O) / sum(w*E) with w[t, p] = (t - p)^2 / (K - 1)^2.

    O is the normalized confusion matrix and E the outer product of its
    marginals. When both raters put all mass on one class the expected
    disagreement is zero; agreement is then perfect and kappa is 1.
    """
    counts = _counts(cm)
    k = counts.shape[0]
    if k < 2:
        raise MetricError("kappa needs at least 2 classes")
    idx = np.arange(k)
    w = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    total = counts.sum()
    observed = counts / total
    expected = np.outer(counts.sum(axis=1), counts.sum(axis=0)) / total**2
    num = float((w * observed).sum())
    den = float((w * expected).sum())
    if den == 0.0:
        if num == 0.0:
            return 1.0
        raise MetricError("kappa undefined: zero expected disagreement with nonzero observed disagreement")
    return 1.0 - num / den


@dataclass
class MetricsReport:
    acc: float
    kappa: float
    recall: list[float] = field(default_factory=list)
    n: int = 0
    name: str = ""

    def render(self) -> str:
        return render_table([self])

    def csv_row(self) -> dict:
        return {"config_name": self.name, "acc": repr(self.acc), "kappa": repr(self.kappa), "n": self.n}


def report(cm: ConfusionMatrix, name: str = "") -> MetricsReport:
    counts = cm.counts
    rows = counts.sum(axis=1)
    recall = [float(counts[i, i] / rows[i]) if rows[i] else float("nan") for i in range(cm.num_classes)]
    return MetricsReport(accuracy(cm), quadratic_weighted_kappa(cm), recall, cm.total, name)


def render_table(reports: list[MetricsReport]) -> str:
    width = max([len("config")] + [len(r.name) for r in reports])
    lines = [f"{'config':<{width}}  {'Acc':>5}  {'Kappa':>6}  {'n':>4}"]
    for r in reports:
        lines.append(f"{r.name:<{width}}  {r.acc:5.3f}  {r.kappa:6.3f}  {r.n:>4d}")
    return "\n".join(lines) + "\n"


CSV_COLUMNS = ("config_name", "acc", "kappa", "n")


def reports_to_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricsReport]:
    rows = csv.DictReader(io.StringIO(text))
    return [MetricsReport(float(r["acc"]), float(r["kappa"]), [], int(r["n"]), r["config_name"]) for r in rows]
