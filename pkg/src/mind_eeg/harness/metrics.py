"""Accuracy, macro-F1, confusion matrices and cross-plan aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(y_true, y_pred, classes: int) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def macro_f1(cm: np.ndarray) -> float:
    """Mean per-class F1; classes with no predictions and no support score 0."""
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


@dataclass
class MetricsReport:
    accuracy: float  # percent
    f1: float  # percent
    confusion: np.ndarray
    name: str = ""

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes: int, name: str = "") -> "MetricsReport":
        y_true = np.asarray(y_true)
        if y_true.size == 0:
            raise ValueError("cannot score an empty test set")
        cm = confusion_matrix(y_true, y_pred, classes)
        return cls(100.0 * np.trace(cm) / cm.sum(), 100.0 * macro_f1(cm), cm, name)


@dataclass
class Aggregate:
    accuracies: list[float] = field(default_factory=list)
    f1s: list[float] = field(default_factory=list)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_acc(self) -> float:
        # population std (divide by N) across subjects/folds
        return float(np.std(self.accuracies))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1s))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.f1s))

    def summary(self) -> str:
        return f"ACC {format_mean_std(self.accuracies)}  F1 {format_mean_std(self.f1s)}"


def aggregate(reports: list[MetricsReport]) -> Aggregate:
    return Aggregate([r.accuracy for r in reports], [r.f1 for r in reports])


def format_mean_std(values) -> str:
    """``xx.xx±yy.yy`` with population standard deviation."""
    values = np.asarray(values, dtype=float)
    return f"{values.mean():05.2f}±{values.std():05.2f}"
