"""Confusion-matrix accumulation and mean-IoU reporting.

Ground-truth pixels labeled 255 are ignored. Classes absent from both
prediction and ground truth are reported as not applicable and excluded
from the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .seg_head import IGNORE_LABEL


@dataclass
class EvalResult:
    per_class_iou: list[float | None]  # None = class absent from GT and pred
    miou: float
    pixels_scored: int

    def to_json(self, class_names: list[str] | None = None) -> dict:
        names = class_names or [str(i) for i in range(len(self.per_class_iou))]
        return {
            "per_class": [
                {"name": n, "iou": iou}
                for n, iou in zip(names, self.per_class_iou)
            ],
            "miou": self.miou,
            "pixels_scored": self.pixels_scored,
        }


def new_confusion(num_classes: int) -> np.ndarray:
    if num_classes < 1:
        raise ValidationError("need at least one class")
    return np.zeros((num_classes, num_classes), dtype=np.uint64)


def accumulate(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Return a new confusion matrix with this image's pixels added.

    Rows index ground truth, columns index prediction. Merging per-image
    matrices is associative and commutative, so images may be scored in any
    order or in parallel.
    """
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValidationError(f"confusion matrix must be square, got {cm.shape}")
    if pred.shape != gt.shape:
        raise ValidationError(
            f"prediction {pred.shape} and ground truth {gt.shape} differ")
    num_classes = cm.shape[0]
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if (pred == IGNORE_LABEL).any():
        raise ValidationError("prediction contains the ignore value 255; "
                              "predictions must be complete")
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= num_classes:
        raise ValidationError(f"prediction labels outside [0, {num_classes})")
    keep = gt != IGNORE_LABEL
    gt_kept = gt[keep]
    if gt_kept.size and (gt_kept.min() < 0 or gt_kept.max() >= num_classes):
        raise ValidationError(
            f"ground-truth labels outside [0, {num_classes}) and not 255")
    delta = np.bincount(
        gt_kept.astype(np.int64) * num_classes + pred[keep].astype(np.int64),
        minlength=num_classes * num_classes,
    ).reshape(num_classes, num_classes).astype(np.uint64)
    return cm + delta


def merge(*cms: np.ndarray) -> np.ndarray:
    out = cms[0].copy()
    for cm in cms[1:]:
        if cm.shape != out.shape:
            raise ValidationError("confusion matrices differ in shape")
        out += cm
    return out


def miou(cm: np.ndarray) -> EvalResult:
    """Per-class IoU and their mean over classes present in GT or prediction."""
    diag = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0).astype(np.float64) + cm.sum(axis=1).astype(np.float64) - diag
    per_class: list[float | None] = []
    applicable = []
    for c in range(cm.shape[0]):
        if union[c] == 0:
            per_class.append(None)
        else:
            iou = float(diag[c] / union[c])
            per_class.append(iou)
            applicable.append(iou)
    if not applicable:
        raise ValidationError("no scorable classes: confusion matrix is empty")
    return EvalResult(
        per_class_iou=per_class,
        miou=float(np.mean(applicable)),
        pixels_scored=int(cm.sum()),
    )


def eval_to_csv(result: EvalResult, class_names: list[str] | None = None) -> str:
    names = class_names or [str(i) for i in range(len(result.per_class_iou))]
    lines = ["name,iou"]
    for name, iou in zip(names, result.per_class_iou):
        lines.append(f"{name},{'' if iou is None else f'{iou:.6f}'}")
    lines.append(f"__miou__,{result.miou:.6f}")
    lines.append(f"__pixels_scored__,{result.pixels_scored}")
    return "\n".join(lines) + "\n"
