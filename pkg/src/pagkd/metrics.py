"""Classification metrics: accuracy, macro precision/recall/F1 and macro one-vs-rest AUC."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

_trapezoid = getattr(np, "trapezoid", None) or np.trapz   # numpy < 2 has only trapz


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    per_class_auc: dict = field(default_factory=dict)
    roc: dict = field(default_factory=dict)       # class -> list of (fpr, tpr)
    n: int = 0

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "auc": self.auc, "n": self.n}


def roc_points(scores: np.ndarray, positive: np.ndarray) -> np.ndarray:
    """Exact ROC: one vertex per distinct score threshold, from (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    ends = np.r_[distinct, s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    tpr = np.r_[0.0, tp / n_pos] if n_pos else np.r_[0.0, np.zeros_like(tp, dtype=float)]
    fpr = np.r_[0.0, fp / n_neg] if n_neg else np.r_[0.0, np.zeros_like(fp, dtype=float)]
    return np.stack([fpr, tpr], axis=1)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Trapezoidal area under the exact ROC (ties contribute one half)."""
    pts = roc_points(scores, positive)
    return float(_trapezoid(pts[:, 1], pts[:, 0]))


def compute_metrics(probs: np.ndarray, labels: np.ndarray, num_classes: int | None = None) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"probabilities {probs.shape} do not match {labels.shape[0]} labels")
    if probs.size and np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("probability rows must sum to 1")
    k = num_classes or probs.shape[1]
    pred = probs.argmax(axis=1)
    present = [c for c in range(k) if np.any(labels == c)]
    absent = [c for c in range(k) if c not in present]
    if absent:
        warnings.warn(f"classes {absent} absent from labels; excluded from macro averages")
    prec, rec, f1 = [], [], []
    for c in present:
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    per_auc, roc = {}, {}
    if k == 2:
        targets = [1] if 1 in present and 0 in present else []
    else:
        targets = [c for c in present if np.any(labels != c)]
    for c in targets:
        pos = labels == c
        per_auc[c] = binary_auc(probs[:, c], pos)
        roc[c] = roc_points(probs[:, c], pos).tolist()
    return MetricsReport(
        accuracy=float(np.mean(pred == labels)) if labels.size else 0.0,
        precision=float(np.mean(prec)) if prec else 0.0,
        recall=float(np.mean(rec)) if rec else 0.0,
        f1=float(np.mean(f1)) if f1 else 0.0,
        auc=float(np.mean(list(per_auc.values()))) if per_auc else float("nan"),
        per_class_auc=per_auc, roc=roc, n=int(labels.size))
