"""Confusion-matrix accumulation and segmentation metrics."""
from __future__ import annotations

import dataclasses

import numpy as np

__all__ = ["ConfusionMatrix", "Metrics", "accumulate", "metrics", "format_report", "IGNORE_LABEL"]

IGNORE_LABEL = 255


class ConfusionMatrix:
    """``counts[i, j]`` = pixels of true class i predicted as class j."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or np.any(counts < 0):
            raise ValueError("counts must be a non-negative C x C matrix")
        self.counts = counts.copy()
        self.unpredicted = 0
        """Ground-truth pixels skipped because the prediction was not a class id."""

    @property
    def totals(self) -> np.ndarray:
        """t_i, the number of ground-truth pixels of each class."""
        return self.counts.sum(axis=1)

    @property
    def present(self) -> np.ndarray:
        return self.totals > 0

    def add(self, pred, gt, ignore_label: int = IGNORE_LABEL) -> ConfusionMatrix:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
        gt = gt.astype(np.int64).ravel()
        pred = pred.astype(np.int64).ravel()
        keep = gt != ignore_label
        if np.any((gt[keep] < 0) | (gt[keep] >= self.num_classes)):
            raise ValueError("ground truth holds a label outside [0, C) that is not the ignore label")
        gt, pred = gt[keep], pred[keep]
        ok = (pred >= 0) & (pred < self.num_classes)
        self.unpredicted += int(np.count_nonzero(~ok))
        C = self.num_classes
        self.counts += np.bincount(gt[ok] * C + pred[ok], minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different size")
        out = ConfusionMatrix(self.num_classes, self.counts + other.counts)
        out.unpredicted = self.unpredicted + other.unpredicted
        return out

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"


def accumulate(cm: ConfusionMatrix, pred, gt, ignore_label: int = IGNORE_LABEL) -> ConfusionMatrix:
    """Add a labeled image pair to ``cm`` (in place) and return it."""
    return cm.add(pred, gt, ignore_label)


@dataclasses.dataclass(frozen=True)
class Metrics:
    pixel_acc: float
    mean_acc: float
    mean_iu: float
    fw_iu: float
    class_iu: np.ndarray
    """Per-class IU; NaN for classes absent from the ground truth."""

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.pixel_acc, self.mean_acc, self.mean_iu, self.fw_iu)


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Pixel accuracy, mean accuracy, mean IU and frequency-weighted IU.

    Classes absent from the ground truth (t_i = 0) are left out of the means.
    """
    n = cm.counts.astype(np.float64)
    total = n.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(n)
    t = n.sum(axis=1)
    present = t > 0
    union = t + n.sum(axis=0) - diag
    iu = np.full(cm.num_classes, np.nan)
    iu[present] = diag[present] / union[present]
    recall = diag[present] / t[present]
    return Metrics(
        pixel_acc=float(diag.sum() / t.sum()),
        mean_acc=float(recall.mean()),
        mean_iu=float(iu[present].mean()),
        fw_iu=float(np.sum(t[present] * iu[present]) / t.sum()),
        class_iu=iu,
    )


def format_report(m: Metrics, class_names: list[str] | None = None, per_class: bool = False) -> str:
    lines = ["pixel_acc mean_acc mean_iu fw_iu",
             f"{m.pixel_acc:.4f} {m.mean_acc:.4f} {m.mean_iu:.4f} {m.fw_iu:.4f}"]
    if per_class:
        for c, v in enumerate(m.class_iu):
            if np.isnan(v):
                continue
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            lines.append(f"{c} {name} {v:.4f}")
    return "\n".join(lines) + "\n"
