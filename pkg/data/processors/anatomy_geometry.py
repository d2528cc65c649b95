"""
Anatomical reference frame from the C2-C4 cervical spine.

Origin at C4, y axis toward C2, x axis = y axis rotated by -90 degrees in image
coordinates (x right, y down). For a left-facing lateral projection x grows
toward the anterior side. `flip_x` reverses it.
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from data.models.errors import DataValidationError
from data.models.schemas import SpineLandmarks, SpineTransform

logger = logging.getLogger(__name__)


def spine_transform(landmarks: SpineLandmarks, flip_x: bool = False) -> SpineTransform:
    c2 = np.asarray(landmarks.c2, dtype=np.float64)
    c4 = np.asarray(landmarks.c4, dtype=np.float64)
    d = float(np.linalg.norm(c2 - c4))
    if d <= 0:
        raise DataValidationError(f"C2 and C4 coincide at {tuple(c2)}")
    unit_y = (c2 - c4) / d
    unit_x = np.array([unit_y[1], -unit_y[0]])
    if flip_x:
        unit_x = -unit_x
    return SpineTransform(
        origin=tuple(c4),
        unit_x=tuple(unit_x),
        unit_y=tuple(unit_y),
        d=d
    )


def to_spine(point: Tuple[float, float], transform: SpineTransform) -> Tuple[float, float]:
    offset = np.asarray(point, dtype=np.float64) - np.asarray(transform.origin)
    return float(offset @ np.asarray(transform.unit_x)), float(offset @ np.asarray(transform.unit_y))


def to_spine_many(points: np.ndarray, transform: SpineTransform) -> np.ndarray:
    """Vectorized to_spine over an [n, 2] array of (x, y)"""
    offsets = np.asarray(points, dtype=np.float64).reshape(-1, 2) - np.asarray(transform.origin)
    basis = np.column_stack([transform.unit_x, transform.unit_y])
    return offsets @ basis


def landmarks_for_frame(
    spine: Dict[int, SpineLandmarks], frame: int
) -> Tuple[Optional[SpineLandmarks], bool]:
    """Landmarks for a frame and whether they were borrowed from the nearest annotated frame"""
    if not spine:
        return None, False
    if frame in spine:
        return spine[frame], False
    nearest = min(spine, key=lambda annotated: (abs(annotated - frame), annotated))
    return spine[nearest], True
