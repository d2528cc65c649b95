"""
Evaluation quantities for phase detection and bolus localization.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from data.models.errors import DataValidationError
from data.models.schemas import PhaseSequence

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]


def _f1(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ============================================================================
# PHASE DETECTION
# ============================================================================

def f1_frames(pred: PhaseSequence, gt: PhaseSequence) -> float:
    """Frame-level F1 for class P"""
    if len(pred) != len(gt):
        raise DataValidationError(f"Sequence lengths differ: {len(pred)} predicted vs {len(gt)} ground truth")
    pred_p, gt_p = pred.is_p(), gt.is_p()
    tp = int(np.sum(pred_p & gt_p))
    fp = int(np.sum(pred_p & ~gt_p))
    fn = int(np.sum(~pred_p & gt_p))
    return _f1(tp, fp, fn)


def p3(pred_frames: Sequence[Optional[int]], gt_frames: Sequence[int], tol: int = 3) -> float:
    """Percentage of events detected within tol frames; missing detections count as failures"""
    if len(pred_frames) != len(gt_frames):
        raise DataValidationError(f"{len(pred_frames)} predictions for {len(gt_frames)} ground-truth events")
    if len(gt_frames) == 0:
        raise DataValidationError("P3 needs at least one event")
    hits = sum(
        1 for pred, truth in zip(pred_frames, gt_frames)
        if pred is not None and abs(pred - truth) <= tol
    )
    return 100.0 * hits / len(gt_frames)


def pearson_r(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise DataValidationError(f"Pearson r needs two equal-length series of 2+ values, got {a.shape} and {b.shape}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DataValidationError("Pearson r is undefined for a constant series")
    r = float(stats.pearsonr(a, b)[0])
    return float(np.clip(r, -1.0, 1.0))


def interrater_agreement(
    rater_a: Sequence[int], rater_b: Sequence[int], tol: int = 3
) -> Tuple[float, float]:
    """(Pearson r, P3) between two raters' pre-consensus frame selections"""
    return pearson_r(rater_a, rater_b), p3(list(rater_a), list(rater_b), tol)


def format_interrater(r: float, p3_value: float) -> str:
    return f"r = {r:.3f}  P3 = {p3_value:.2f}%"


# ============================================================================
# LOCALIZATION
# ============================================================================

def rmse_norm(pred_pts: Sequence[Tuple[float, float]], gt_pts: Sequence[Tuple[float, float]], d: float) -> float:
    """Root mean squared centroid error divided by the C2-C4 distance"""
    pred = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0 or pred.shape != gt.shape:
        raise DataValidationError(f"RMSE needs equal non-empty point lists, got {len(pred)} and {len(gt)}")
    if d <= 0:
        raise DataValidationError(f"Normalization distance must be positive, got {d}")
    squared = np.sum((pred - gt) ** 2, axis=1)
    return float(np.sqrt(squared.mean()) / d)


def _area(box: Box) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection over union of (x_min, y_min, x_max, y_max) extents"""
    for box in (box_a, box_b):
        if box[0] > box[2] or box[1] > box[3]:
            raise DataValidationError(f"Malformed box {box}")
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    intersection = ix * iy
    union = _area(box_a) + _area(box_b) - intersection
    if union <= 0:
        return 0.0
    return float(intersection / union)


def pixel_box_extent(bbox: Tuple[int, int, int, int]) -> Box:
    """Inclusive pixel bbox -> continuous extent covering those pixels"""
    return (float(bbox[0]), float(bbox[1]), float(bbox[2] + 1), float(bbox[3] + 1))


def default_thresholds(start: float = 0.25, stop: float = 0.75, step: float = 0.05) -> List[float]:
    count = int(round((stop - start) / step)) + 1
    return [round(float(t), 6) for t in np.linspace(start, stop, count)]


def bbox_f1_sweep(
    pred_boxes: Sequence[Optional[Box]],
    gt_boxes: Sequence[Box],
    thresholds: Optional[Sequence[float]] = None
) -> Dict[float, float]:
    """F1 per IoU threshold; a missing prediction is a false negative only"""
    if len(pred_boxes) != len(gt_boxes):
        raise DataValidationError(f"{len(pred_boxes)} predicted boxes for {len(gt_boxes)} ground-truth boxes")
    thresholds = default_thresholds() if thresholds is None else list(thresholds)
    for t in thresholds:
        if not 0 < t < 1:
            raise DataValidationError(f"IoU threshold {t} outside (0, 1)")

    ious = [None if pred is None else iou(pred, gt) for pred, gt in zip(pred_boxes, gt_boxes)]
    curve: Dict[float, float] = {}
    for t in thresholds:
        tp = sum(1 for value in ious if value is not None and value >= t)
        fp = sum(1 for value in ious if value is not None and value < t)
        fn = sum(1 for value in ious if value is None or value < t)
        curve[t] = _f1(tp, fp, fn)
    return curve


def median_iqr(values: Sequence[float]) -> Tuple[float, float, float]:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise DataValidationError("Median/IQR of an empty sample")
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return float(median), float(q1), float(q3)


def format_median_iqr(median: float, q1: float, q3: float) -> str:
    return f"{median:.3f} ({q1:.3f}-{q3:.3f})"
