"""Confusion-matrix mIoU evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import PreconditionError


@dataclass
class EvalReport:
    per_class_iou: dict
    mean_iou: float
    foreground_miou: float
    background_iou: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "mean_iou": self.mean_iou,
            "foreground_miou": self.foreground_miou,
            "background_iou": self.background_iou,
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(pred, gt, num_labels: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    return np.bincount(gt * num_labels + pred, minlength=num_labels**2).reshape(num_labels, num_labels)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def evaluate(masks: Sequence, gt_masks: Sequence, num_classes: int = 3) -> EvalReport:
    if len(masks) != len(gt_masks):
        raise PreconditionError("prediction and ground-truth lists differ in length")
    n = num_classes + 1
    conf = np.zeros((n, n), dtype=np.int64)
    for p, g in zip(masks, gt_masks):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise PreconditionError(f"mask shape {p.shape} differs from ground truth {g.shape}")
        if p.min() < 0 or p.max() >= n or g.min() < 0 or g.max() >= n:
            raise PreconditionError("class index out of range")
        conf += confusion_matrix(p, g, n)
    iou = iou_from_confusion(conf)
    valid = ~np.isnan(iou)
    mean = float(iou[valid].mean()) if valid.any() else float("nan")
    fg = iou[1:][valid[1:]]
    return EvalReport(
        per_class_iou={c: float(iou[c]) for c in range(n)},
        mean_iou=mean,
        foreground_miou=float(fg.mean()) if fg.size else float("nan"),
        background_iou=float(iou[0]),
        confusion=conf,
    )
