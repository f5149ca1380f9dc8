"""Confusion-matrix accumulation and per-class / mean F1 and IoU scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import CLASS_NAMES, VOID

FOREGROUND = (0, 1, 2, 3, 4)   # clutter (5) excluded from means


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    iou: float


class ConfusionMatrix:
    """Rows = ground truth, columns = prediction; void (255) pixels skipped."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"extent mismatch: pred {pred.shape} vs truth {truth.shape}")
        if pred.size == 0:
            return self
        c = self.num_classes
        if pred.min() < 0 or pred.max() >= c:
            raise ValueError(f"prediction contains class outside 0..{c - 1}")
        valid = truth != VOID
        t = truth[valid].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= c):
            raise ValueError(f"truth contains class outside 0..{c - 1} (255 = void)")
        p = pred[valid].astype(np.int64)
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


def class_scores(cm: ConfusionMatrix, n: int) -> Optional[ClassScores]:
    """Precision/recall/F1/IoU for class n; None when the class never occurs.

    F1 is defined as 0 when precision and recall are both 0; the scores are
    undefined (None) only when TP, FP, and FN are all zero.
    """
    if not 0 <= n < cm.num_classes:
        raise ValueError(f"class {n} out of range")
    tp = int(cm.counts[n, n])
    fp = int(cm.counts[:, n].sum()) - tp
    fn = int(cm.counts[n, :].sum()) - tp
    if tp == 0 and fp == 0 and fn == 0:
        return None
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = tp / (tp + fp + fn)
    return ClassScores(precision, recall, f1, iou)


def mean_scores(cm: ConfusionMatrix,
                foreground: Sequence[int] = FOREGROUND) -> tuple[float, float]:
    """Unweighted (mF1, mIoU) over foreground classes with defined scores."""
    if not foreground:
        raise ValueError("foreground class set is empty")
    f1s, ious = [], []
    for n in foreground:
        s = class_scores(cm, n)
        if s is not None:
            f1s.append(s.f1)
            ious.append(s.iou)
    if not f1s:
        raise ValueError("no foreground class has defined scores")
    return float(np.mean(f1s)), float(np.mean(ious))


def format_report(cm: ConfusionMatrix, class_names: Sequence[str] = CLASS_NAMES,
                  foreground: Sequence[int] = FOREGROUND) -> str:
    """Per-class table plus foreground means, one metric block per line."""
    width = max(len(n) for n in class_names)
    lines = [f"{'class':<{width}}  {'prec':>8} {'recall':>8} {'f1':>8} {'iou':>8}"]
    for n, name in enumerate(class_names):
        s = class_scores(cm, n)
        if s is None:
            lines.append(f"{name:<{width}}  {'--':>8} {'--':>8} {'--':>8} {'--':>8}")
        else:
            lines.append(f"{name:<{width}}  {s.precision:>8.4f} {s.recall:>8.4f} "
                         f"{s.f1:>8.4f} {s.iou:>8.4f}")
    mf1, miou = mean_scores(cm, foreground)
    lines.append(f"mean(foreground)  mF1 {mf1:.4f}  mIoU {miou:.4f}")
    return "\n".join(lines)
