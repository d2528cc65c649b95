"""
Frame labeling and subject-wise dataset splitting.
"""

import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from data.models.errors import DataValidationError
from data.models.schemas import ClipAnnotation, ClipManifestEntry, DatasetSplit, PhaseSequence

logger = logging.getLogger(__name__)

PARTITIONS = ("train", "val", "test")


def label_frames(annotation: ClipAnnotation, n_frames: int) -> PhaseSequence:
    """Frames in [bpm, uesc] (both included) are P, everything else N"""
    if n_frames < 1:
        raise DataValidationError(f"Clip {annotation.clip_id}: n_frames must be positive, got {n_frames}")
    if not 0 <= annotation.bpm_frame <= annotation.uesc_frame < n_frames:
        raise DataValidationError(
            f"Clip {annotation.clip_id}: annotation ({annotation.bpm_frame}, {annotation.uesc_frame}) "
            f"out of range for {n_frames} frames"
        )
    is_p = np.zeros(n_frames, dtype=bool)
    is_p[annotation.bpm_frame:annotation.uesc_frame + 1] = True
    return PhaseSequence.from_mask(is_p)


def _partition_counts(n_subjects: int, ratios: Tuple[float, float, float]) -> List[int]:
    # Validation and test counts round half up; training takes the remainder
    n_val = int(np.floor(ratios[1] * n_subjects + 0.5))
    n_test = int(np.floor(ratios[2] * n_subjects + 0.5))
    return [n_subjects - n_val - n_test, n_val, n_test]


def subject_split(
    entries: Sequence[ClipManifestEntry],
    ratios: Tuple[float, float, float],
    seed: int
) -> DatasetSplit:
    """Assign every subject (and all of its clips) to exactly one partition"""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataValidationError(f"Split ratios must be three positives summing to 1, got {ratios}")

    subjects = sorted({entry.subject_id for entry in entries})
    if len(subjects) < 3:
        raise DataValidationError(
            f"Need at least 3 subjects for three non-empty partitions, got {len(subjects)}"
        )

    counts = _partition_counts(len(subjects), ratios)
    if min(counts) <= 0:
        raise DataValidationError(
            f"{len(subjects)} subjects cannot fill three non-empty partitions with ratios {ratios} "
            f"(counts {counts})"
        )

    rng = np.random.default_rng(seed)
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]

    assignment: Dict[str, str] = {}
    start = 0
    for name, count in zip(PARTITIONS, counts):
        for subject in shuffled[start:start + count]:
            assignment[subject] = name
        start += count

    clips: Dict[str, List[str]] = {name: [] for name in PARTITIONS}
    for entry in entries:
        clips[assignment[entry.subject_id]].append(entry.clip_id)

    logger.info(
        f"Split {len(subjects)} subjects into {counts[0]}/{counts[1]}/{counts[2]} "
        f"({len(clips['train'])}/{len(clips['val'])}/{len(clips['test'])} clips), seed {seed}"
    )
    return DatasetSplit(
        train_clips=clips["train"],
        val_clips=clips["val"],
        test_clips=clips["test"],
        seed=seed,
        subjects=dict(sorted(assignment.items()))
    )
