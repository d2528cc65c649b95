"""
Weakly-supervised bolus localization: refine an upsampled activation map into a
bolus mask by thresholding, morphology, darkest-pixel seeding, convex hull and
a morphological geodesic active contour.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import ConvexHull, QhullError
from skimage.draw import line, polygon
from skimage.measure import label
from skimage.morphology import disk
from skimage.segmentation import morphological_geodesic_active_contour

from data.models.errors import DataValidationError, EmptyActivationError
from data.models.schemas import ActivationMap, BolusEstimate, RefineConfig

logger = logging.getLogger(__name__)


# ============================================================================
# STAGES
# ============================================================================

def binarize_map(values: np.ndarray, threshold_frac: float = 0.5) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0:
        raise EmptyActivationError("Activation map is identically zero")
    return values >= threshold_frac * peak


def _check_nonempty(mask: np.ndarray, stage: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataValidationError(f"{stage}: mask is empty")
    return mask


def clean_mask(mask: np.ndarray, dilation_radius: int = 2) -> np.ndarray:
    """Dilate, fill enclosed holes, keep the largest 8-connected component"""
    mask = _check_nonempty(mask, "clean_mask")
    if dilation_radius > 0:
        mask = ndi.binary_dilation(mask, structure=disk(dilation_radius))
    mask = ndi.binary_fill_holes(mask)

    labels = label(mask, connectivity=2)
    flat = labels.ravel()
    areas = np.bincount(flat)
    areas[0] = 0
    candidates = np.flatnonzero(areas == areas.max())
    if len(candidates) > 1:
        # Equal areas: the component reached first in raster order wins
        ids, first_index = np.unique(flat, return_index=True)
        first_pixel = dict(zip(ids, first_index))
        keep = min(candidates, key=lambda c: first_pixel[c])
    else:
        keep = candidates[0]
    return labels == keep


def darkest_k(frame: np.ndarray, mask: np.ndarray, k: int = 100) -> np.ndarray:
    """(row, col) of the k lowest-intensity masked pixels, ties in raster order"""
    mask = _check_nonempty(mask, "darkest_k")
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != mask.shape:
        raise DataValidationError(f"Frame {frame.shape} and mask {mask.shape} are not aligned")
    flat_index = np.flatnonzero(mask)
    order = np.argsort(frame.ravel()[flat_index], kind="stable")[:k]
    rows, cols = np.unravel_index(flat_index[order], mask.shape)
    return np.column_stack([rows, cols])


def convex_hull(points: np.ndarray, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hull of (row, col) points.

    Returns (vertices, filled mask). Vertices are (x, y) = (col, row) pairs in
    counterclockwise order of the x/y plane. Collinear inputs give the two end
    points and a 1-px-thick segment mask.
    """
    points = np.asarray(points, dtype=int).reshape(-1, 2)
    if len(points) == 0:
        raise DataValidationError("convex_hull needs at least one point")
    xy = points[:, ::-1].astype(np.float64)
    filled = np.zeros(shape, dtype=bool)

    unique_xy = np.unique(xy, axis=0)
    try:
        if len(unique_xy) < 3:
            raise QhullError("fewer than three distinct points")
        hull = ConvexHull(unique_xy)
        vertices = unique_xy[hull.vertices]
        rr, cc = polygon(vertices[:, 1], vertices[:, 0], shape)
        filled[rr, cc] = True
        closed = np.vstack([vertices, vertices[:1]])
        for (x0, y0), (x1, y1) in zip(closed[:-1], closed[1:]):
            rr, cc = line(int(y0), int(x0), int(y1), int(x1))
            filled[rr, cc] = True
    except QhullError:
        # Degenerate hull: segment between the two extreme points
        order = np.lexsort((unique_xy[:, 1], unique_xy[:, 0]))
        first, last = unique_xy[order[0]], unique_xy[order[-1]]
        vertices = np.array([first]) if np.array_equal(first, last) else np.array([first, last])
        rr, cc = line(int(first[1]), int(first[0]), int(last[1]), int(last[0]))
        filled[rr, cc] = True

    filled[points[:, 0], points[:, 1]] = True
    return vertices.astype(int), filled


def edge_stopping(frame: np.ndarray, sigma: float = 2.0, scale: float = 100.0, exponent: float = 2.0) -> np.ndarray:
    """g = 1 / sqrt(1 + scale * |grad(G_sigma * frame)| ** exponent)"""
    gradient = ndi.gaussian_gradient_magnitude(np.asarray(frame, dtype=np.float64), sigma)
    return 1.0 / np.sqrt(1.0 + scale * gradient ** exponent)


def geodesic_active_contour(frame: np.ndarray, init_mask: np.ndarray, settings: RefineConfig) -> np.ndarray:
    init_mask = _check_nonempty(init_mask, "geodesic_active_contour")
    if settings.gac_iterations == 0:
        return init_mask.copy()
    g = edge_stopping(frame, settings.gac_smooth_sigma, settings.gac_edge_scale, settings.gac_edge_exponent)
    evolved = morphological_geodesic_active_contour(
        g,
        settings.gac_iterations,
        init_level_set=init_mask.astype(np.int8),
        smoothing=settings.gac_smoothing,
        threshold=settings.gac_balloon_threshold,
        balloon=settings.balloon.force
    )
    return evolved.astype(bool)


def centroid_and_bbox(mask: np.ndarray) -> Tuple[Tuple[float, float], Tuple[int, int, int, int]]:
    """Centroid (x, y) and inclusive bbox (x_min, y_min, x_max, y_max)"""
    mask = _check_nonempty(mask, "centroid_and_bbox")
    rows, cols = np.nonzero(mask)
    centroid = (float(cols.mean()), float(rows.mean()))
    bbox = (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))
    return centroid, bbox


# ============================================================================
# COMPOSITION
# ============================================================================

def localize(
    frame: np.ndarray, activation: ActivationMap, settings: RefineConfig, frame_id: int = 0
) -> Optional[BolusEstimate]:
    """binarize -> clean -> darkest_k -> convex hull -> GAC -> centroid/bbox; None when nothing to localize"""
    frame = np.asarray(frame, dtype=np.float64)
    if activation.values.shape != frame.shape:
        raise DataValidationError(
            f"Activation map {activation.values.shape} is not aligned with frame {frame.shape}"
        )
    try:
        coarse = binarize_map(activation.values, settings.threshold_frac)
    except EmptyActivationError:
        logger.debug(f"Frame {frame_id}: empty activation, no detection")
        return None

    region = clean_mask(coarse, settings.dilation_radius)
    seeds = darkest_k(frame, region, settings.k_darkest)
    _, hull_mask = convex_hull(seeds, frame.shape)
    refined = geodesic_active_contour(frame, hull_mask, settings)
    if not refined.any():
        logger.debug(f"Frame {frame_id}: active contour vanished, no detection")
        return None

    centroid, bbox = centroid_and_bbox(refined)
    return BolusEstimate(mask=refined, centroid=centroid, bbox=bbox, frame_id=frame_id)
