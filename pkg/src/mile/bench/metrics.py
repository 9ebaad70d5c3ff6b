"""IoU / mIoU accumulated over whole evaluation sets, and the relative change vs. a reference."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError, UndefinedReferenceError
from ..nn import IGNORE_INDEX


def confusion_counts(pred: np.ndarray, gt: np.ndarray, class_count: int) -> np.ndarray:
    """(class_count, class_count) pixel counts, rows = ground truth; ignore-index pixels skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != IGNORE_INDEX
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.max() >= class_count or g.max() >= class_count or min(p.min(), g.min()) < 0):
        raise ShapeError(f"class id outside [0, {class_count})")
    return np.bincount(g * class_count + p, minlength=class_count ** 2).reshape(class_count, class_count)


def iou_from_counts(counts: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    out = np.full(len(counts), np.nan)
    present = union > 0
    out[present] = inter[present] / union[present]
    return out


def iou_per_class(pred: np.ndarray, gt: np.ndarray, class_count: int) -> np.ndarray:
    return iou_from_counts(confusion_counts(pred, gt, class_count))


def miou(pred: np.ndarray, gt: np.ndarray, class_count: int) -> float:
    """Mean IoU over classes that occur in prediction or ground truth."""
    ious = iou_per_class(pred, gt, class_count)
    if np.all(np.isnan(ious)):
        return float("nan")
    return float(np.nanmean(ious))


def delta_p(method_miou: float, single_task_miou: float) -> float:
    """Percent change of ``method_miou`` relative to the single-task reference."""
    if not single_task_miou > 0:
        raise UndefinedReferenceError(f"reference mIoU must be > 0, got {single_task_miou}")
    return 100.0 * (method_miou - single_task_miou) / single_task_miou


def format_delta_p(value: float) -> str:
    """Two decimals with an explicit sign; ``-0.00`` prints as ``+0.00``."""
    text = f"{value:+.2f}"
    return "+0.00" if text == "-0.00" else text
