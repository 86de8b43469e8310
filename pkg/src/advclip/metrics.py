"""Accuracy, macro-F1 and confusion-matrix reports."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


def confusion_matrix(preds, labels, n_classes: int = 2) -> np.ndarray:
    """Rows are true labels, columns predictions."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def per_class_prf(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0).astype(float)
    true_pos = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros_like(tp), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1_from_confusion(cm: np.ndarray, warn: bool = True) -> float:
    if warn and np.any(cm.sum(axis=1) == 0):
        warnings.warn("macro-F1 over a class with no true samples; its F1 counts as 0", RuntimeWarning, stacklevel=2)
    return float(np.mean(per_class_prf(cm)[2]))


def macro_f1(preds, labels, n_classes: int = 2) -> float:
    """Unweighted mean of per-class F1; a class with no samples scores 0."""
    return macro_f1_from_confusion(confusion_matrix(preds, labels, n_classes))


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    return float(np.mean(preds == labels)) if len(labels) else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]
    loss_curve: list[tuple[int, float]] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, preds, labels, n_classes: int = 2, loss_curve=None) -> "MetricsReport":
        cm = confusion_matrix(preds, labels, n_classes)
        p, r, f = per_class_prf(cm)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mf1 = macro_f1_from_confusion(cm, warn=False)
        n = cm.sum()
        acc = float(np.trace(cm) / n) if n else 0.0
        return cls(acc, mf1, p.tolist(), r.tolist(), f.tolist(), cm.tolist(), list(loss_curve or []))

    def check(self, tol: float = 1e-12) -> bool:
        """Recompute accuracy and macro-F1 from the stored confusion matrix."""
        cm = np.asarray(self.confusion)
        acc = np.trace(cm) / cm.sum()
        return abs(acc - self.accuracy) <= tol and abs(macro_f1_from_confusion(cm, warn=False) - self.macro_f1) <= tol

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "confusion": self.confusion}
