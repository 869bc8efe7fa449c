"""Precision / recall / F1 from a confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScopeMetrics:
    precision: float
    recall: float
    f1: float
    positive_f1: float | None
    accuracy: float
    n: int


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def per_class_prf(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(0).astype(np.float64)
    true = cm.sum(1).astype(np.float64)
    p = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    r = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    f = np.array([_f1(a, b) for a, b in zip(p, r)])
    return p, r, f


def classification_metrics(y_true, y_pred, num_classes: int) -> ScopeMetrics:
    """Macro averages (in percent) over the classes present in labels or predictions."""
    cm = confusion_matrix(y_true, y_pred, num_classes)
    p, r, f = per_class_prf(cm)
    present = (cm.sum(0) + cm.sum(1)) > 0
    n = int(cm.sum())
    if n == 0:
        raise ValueError("no samples to score")
    pos_f1 = float(f[1] * 100) if num_classes == 2 else None
    return ScopeMetrics(
        precision=float(p[present].mean() * 100),
        recall=float(r[present].mean() * 100),
        f1=float(f[present].mean() * 100),
        positive_f1=pos_f1,
        accuracy=float(np.trace(cm) / n * 100),
        n=n,
    )
