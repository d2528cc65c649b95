"""
Assemble phase and localization reports from per-clip / per-frame outcomes.
"""

import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from data.models.errors import DataValidationError
from data.models.report_schemas import (
    OVERALL, ClassificationReport, ClipPhaseOutcome, FrameLocalization, InterraterRow,
    LocalizationReport, LocalizationScores, PhaseScores, SectionComparison
)
from data.models.schemas import ClipAnnotation, Consistency, PhaseSequence, SpineLandmarks
from data.processors import metrics, stats
from data.processors.anatomy_geometry import landmarks_for_frame, spine_transform, to_spine
from data.processors.bolus_localizer import centroid_and_bbox
from data.processors.dataset import label_frames
from data.processors.temporal_decoder import decode

logger = logging.getLogger(__name__)

SECTIONS = [OVERALL] + [c.value for c in Consistency]


def _bucket(items: Sequence, section: str) -> List:
    if section == OVERALL:
        return list(items)
    return [item for item in items if item.consistency == section]


# ============================================================================
# PHASE DETECTION
# ============================================================================

def phase_outcome(clip_id: str, consistency: str, predicted: PhaseSequence, annotation: ClipAnnotation) -> ClipPhaseOutcome:
    truth = label_frames(annotation, len(predicted))
    detection = decode(predicted)
    return ClipPhaseOutcome(
        clip_id=clip_id,
        consistency=consistency,
        predicted=predicted.to_string(),
        truth=truth.to_string(),
        pred_bpm=detection.bpm,
        pred_uesc=detection.uesc,
        gt_bpm=annotation.bpm_frame,
        gt_uesc=annotation.uesc_frame
    )


def phase_scores(outcomes: Sequence[ClipPhaseOutcome], tol: int = 3) -> PhaseScores:
    """Frame F1 pooled over all clips plus P3 for both events; empty buckets keep n=0"""
    if not outcomes:
        return PhaseScores(n=0)
    pred = PhaseSequence.from_string("".join(o.predicted for o in outcomes))
    truth = PhaseSequence.from_string("".join(o.truth for o in outcomes))
    return PhaseScores(
        n=len(outcomes),
        f1=metrics.f1_frames(pred, truth),
        p3_bpm=metrics.p3([o.pred_bpm for o in outcomes], [o.gt_bpm for o in outcomes], tol),
        p3_uesc=metrics.p3([o.pred_uesc for o in outcomes], [o.gt_uesc for o in outcomes], tol)
    )


def classification_report(backbone: str, outcomes: Sequence[ClipPhaseOutcome], tol: int = 3) -> ClassificationReport:
    return ClassificationReport(
        backbone=backbone,
        overall=phase_scores(outcomes, tol),
        per_consistency={c.value: phase_scores(_bucket(outcomes, c.value), tol) for c in Consistency}
    )


def interrater_rows(annotations: Sequence[ClipAnnotation], tol: int = 3) -> List[InterraterRow]:
    """Pre-consensus agreement per event; clips without rater columns are skipped"""
    rated = [a for a in annotations if a.has_raters]
    rows = []
    for event in ("bpm", "uesc"):
        a = [getattr(x, f"rater_a_{event}") for x in rated]
        b = [getattr(x, f"rater_b_{event}") for x in rated]
        row = InterraterRow(event=event.upper(), n=len(rated))
        if rated:
            row.p3 = metrics.p3(a, b, tol)
            try:
                row.r = metrics.pearson_r(a, b)
            except DataValidationError as e:
                logger.warning(f"⚠️ Inter-rater r for {event.upper()} undefined: {e}")
        rows.append(row)
    return rows


# ============================================================================
# LOCALIZATION
# ============================================================================

def frame_localization(
    clip_id: str,
    consistency: str,
    frame: int,
    gt_mask: np.ndarray,
    spine: Mapping[int, SpineLandmarks],
    predicted: Optional[dict],
    flip_x: bool = False
) -> Optional[FrameLocalization]:
    """One evaluated frame; predicted is {'centroid': (x, y), 'bbox': (...)} or None. None without landmarks."""
    if not np.asarray(gt_mask).any():
        return None
    landmarks, reused = landmarks_for_frame(dict(spine), frame)
    if landmarks is None:
        logger.warning(f"⚠️ Clip {clip_id} frame {frame}: no spine landmarks, frame not evaluated")
        return None

    transform = spine_transform(landmarks, flip_x)
    gt_centroid, gt_bbox = centroid_and_bbox(np.asarray(gt_mask, dtype=bool))
    outcome = FrameLocalization(
        clip_id=clip_id,
        consistency=consistency,
        frame=frame,
        detected=predicted is not None,
        gt_centroid=gt_centroid,
        gt_bbox=gt_bbox,
        gt_spine=to_spine(gt_centroid, transform),
        d=transform.d,
        landmarks_reused=reused
    )
    if predicted is not None:
        outcome.pred_centroid = tuple(predicted["centroid"])
        outcome.pred_bbox = tuple(predicted["bbox"])
        outcome.pred_spine = to_spine(outcome.pred_centroid, transform)
        outcome.error = metrics.rmse_norm([outcome.pred_centroid], [gt_centroid], transform.d)
    return outcome


def localization_scores(
    outcomes: Sequence[FrameLocalization], thresholds: Optional[Sequence[float]] = None
) -> LocalizationScores:
    """r_y and normalized error median/IQR over detected frames; F1 sweep over all frames"""
    if not outcomes:
        return LocalizationScores(n=0)
    detected = [o for o in outcomes if o.detected]
    scores = LocalizationScores(
        n=len(outcomes),
        n_detected=len(detected),
        f1_curve=metrics.bbox_f1_sweep(
            [metrics.pixel_box_extent(o.pred_bbox) if o.detected else None for o in outcomes],
            [metrics.pixel_box_extent(o.gt_bbox) for o in outcomes],
            thresholds
        )
    )
    if detected:
        scores.rmse_median, scores.rmse_q1, scores.rmse_q3 = metrics.median_iqr([o.error for o in detected])
    if len(detected) >= 2:
        try:
            scores.r_y = metrics.pearson_r([o.pred_spine[1] for o in detected], [o.gt_spine[1] for o in detected])
        except DataValidationError as e:
            logger.debug(f"r_y undefined: {e}")
    return scores


def localization_report(
    backbone: str, outcomes: Sequence[FrameLocalization], thresholds: Optional[Sequence[float]] = None
) -> LocalizationReport:
    return LocalizationReport(
        backbone=backbone,
        overall=localization_scores(outcomes, thresholds),
        per_consistency={
            c.value: localization_scores(_bucket(outcomes, c.value), thresholds) for c in Consistency
        }
    )


# ============================================================================
# BACKBONE COMPARISON
# ============================================================================

def error_matrix(
    outcomes_by_backbone: Mapping[str, Sequence[FrameLocalization]], section: str = OVERALL
) -> Tuple[np.ndarray, List[str], List[Tuple[str, int]]]:
    """Blocks are (clip, frame) pairs localized by every backbone; columns follow backbone order"""
    backbones = list(outcomes_by_backbone)
    errors: Dict[str, Dict[Tuple[str, int], float]] = {
        name: {(o.clip_id, o.frame): o.error for o in _bucket(items, section) if o.detected}
        for name, items in outcomes_by_backbone.items()
    }
    if not backbones:
        return np.empty((0, 0)), [], []
    common = sorted(set.intersection(*(set(e) for e in errors.values())))
    matrix = np.array([[errors[name][key] for name in backbones] for key in common], dtype=np.float64)
    return matrix.reshape(len(common), len(backbones)), backbones, common


def compare_backbones(
    outcomes_by_backbone: Mapping[str, Sequence[FrameLocalization]],
    section: str = OVERALL,
    alpha: float = 0.05
) -> SectionComparison:
    """Friedman on per-frame normalized errors, post-hoc only when the omnibus test is significant"""
    matrix, backbones, _ = error_matrix(outcomes_by_backbone, section)
    comparison = SectionComparison(section=section)
    if len(backbones) < 2 or matrix.shape[0] < 2:
        comparison.note = f"{len(backbones)} backbones, {matrix.shape[0]} common frames: no test"
        return comparison

    comparison.friedman = stats.friedman(matrix, backbones)
    if comparison.friedman.p_value < alpha:
        comparison.posthoc = stats.posthoc_mean_ranks(comparison.friedman, alpha)
    else:
        comparison.note = "omnibus test not significant; no post-hoc comparison"
    return comparison
