#!/usr/bin/env python3
"""
Test Bolus Localizer
Refinement chain: binarize, clean, darkest pixels, convex hull, active contour, centroid/bbox
"""

import numpy as np
import pytest
from skimage.draw import disk as draw_disk

from data.models.errors import DataValidationError, EmptyActivationError
from data.models.schemas import ActivationMap, Balloon, RefineConfig
from data.processors.bolus_localizer import (
    binarize_map, centroid_and_bbox, clean_mask, convex_hull, darkest_k, edge_stopping,
    geodesic_active_contour, localize
)


def disk_mask(shape, center, radius):
    mask = np.zeros(shape, dtype=bool)
    rr, cc = draw_disk(center, radius, shape=shape)
    mask[rr, cc] = True
    return mask


def mask_iou(a, b):
    return np.logical_and(a, b).sum() / np.logical_or(a, b).sum()


def test_binarize_relative_threshold():
    values = np.array([[0.0, 0.4], [0.5, 1.0]])
    assert binarize_map(values, 0.5).tolist() == [[False, False], [True, True]]
    with pytest.raises(EmptyActivationError):
        binarize_map(np.zeros((3, 3)))


def test_clean_mask_keeps_largest_component_and_fills_holes():
    mask = np.zeros((40, 40), dtype=bool)
    mask[5:20, 5:20] = True
    mask[10:13, 10:13] = False
    mask[30:33, 30:33] = True
    cleaned = clean_mask(mask, dilation_radius=0)
    assert cleaned[11, 11]
    assert not cleaned[31, 31]
    assert cleaned.sum() == 15 * 15


def test_clean_mask_tie_prefers_first_in_raster_order():
    mask = np.zeros((20, 20), dtype=bool)
    mask[12:15, 2:5] = True
    mask[2:5, 12:15] = True
    cleaned = clean_mask(mask, dilation_radius=0)
    assert cleaned[3, 13] and not cleaned[13, 3]


def test_clean_mask_dilation_grows_region():
    mask = np.zeros((20, 20), dtype=bool)
    mask[10, 10] = True
    assert clean_mask(mask, dilation_radius=2).sum() == 13
    with pytest.raises(DataValidationError):
        clean_mask(np.zeros((5, 5), dtype=bool))


def test_darkest_k_with_raster_ties():
    frame = np.full((4, 4), 0.5)
    frame[3, 3] = 0.1
    mask = np.ones((4, 4), dtype=bool)
    points = darkest_k(frame, mask, k=3)
    assert points.tolist() == [[3, 3], [0, 0], [0, 1]]
    assert len(darkest_k(frame, mask, k=100)) == 16


def test_convex_hull_square():
    points = np.array([[2, 2], [2, 8], [8, 2], [8, 8], [5, 5]])
    vertices, filled = convex_hull(points, (12, 12))
    assert len(vertices) == 4
    assert filled[2:9, 2:9].all()
    assert filled.sum() == 49
    # counterclockwise in the x/y plane: positive signed area
    x, y = vertices[:, 0], vertices[:, 1]
    assert 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) > 0


def test_convex_hull_degenerate_inputs():
    vertices, filled = convex_hull(np.array([[3, 3], [3, 6], [3, 9]]), (12, 12))
    assert vertices.tolist() == [[3, 3], [9, 3]]
    assert filled[3, 3:10].all() and filled.sum() == 7
    vertices, filled = convex_hull(np.array([[4, 4]]), (8, 8))
    assert filled.sum() == 1


def test_edge_stopping_range():
    frame = np.full((40, 40), 0.9)
    frame[10:30, 10:30] = 0.1
    g = edge_stopping(frame)
    assert g.max() == pytest.approx(1.0)
    assert g.min() < 0.9
    assert np.all((g > 0) & (g <= 1))


def test_gac_recovers_dark_disk():
    shape = (120, 120)
    truth = disk_mask(shape, (60, 60), 30)
    frame = np.where(truth, 0.1, 0.9)
    init = disk_mask(shape, (60, 60), 15)
    result = geodesic_active_contour(frame, init, RefineConfig(gac_iterations=100))
    assert mask_iou(result, truth) >= 0.9


def test_gac_zero_iterations_returns_init():
    init = disk_mask((50, 50), (25, 25), 10)
    result = geodesic_active_contour(np.full((50, 50), 0.5), init, RefineConfig(gac_iterations=0))
    assert np.array_equal(result, init)
    assert result is not init


def test_gac_contract_shrinks_on_flat_image():
    init = disk_mask((120, 120), (60, 60), 40)
    result = geodesic_active_contour(
        np.full((120, 120), 0.5), init, RefineConfig(gac_iterations=10, balloon=Balloon.CONTRACT)
    )
    assert result.sum() < init.sum()
    assert not np.any(result & ~init)


def test_gac_without_balloon_keeps_area_on_flat_image():
    init = disk_mask((200, 200), (100, 100), 80)
    result = geodesic_active_contour(
        np.full((200, 200), 0.5), init, RefineConfig(gac_iterations=100, balloon=Balloon.OFF)
    )
    assert abs(int(result.sum()) - int(init.sum())) <= 0.05 * init.sum()


def test_gac_is_deterministic():
    shape = (120, 120)
    frame = np.where(disk_mask(shape, (60, 60), 30), 0.1, 0.9)
    init = disk_mask(shape, (58, 63), 12)
    settings = RefineConfig(gac_iterations=60)
    assert np.array_equal(
        geodesic_active_contour(frame, init, settings), geodesic_active_contour(frame, init, settings)
    )


def test_centroid_and_bbox():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:5, 3:8] = True
    centroid, bbox = centroid_and_bbox(mask)
    assert centroid == pytest.approx((5.0, 3.0))
    assert bbox == (3, 2, 7, 4)


def test_localize_end_to_end_on_synthetic_frame():
    shape = (120, 120)
    truth = disk_mask(shape, (50, 70), 14)
    frame = np.where(truth, 0.1, 0.85)
    activation = np.zeros(shape)
    activation[40:62, 58:84] = 1.0
    estimate = localize(frame, ActivationMap(values=activation, source_grid=(4, 4)), RefineConfig(), frame_id=3)
    assert estimate is not None
    assert estimate.frame_id == 3
    assert estimate.centroid == pytest.approx((70.0, 50.0), abs=2.0)
    assert mask_iou(estimate.mask, truth) >= 0.85


def test_localize_without_gac_reports_hull_stage():
    shape = (120, 120)
    frame = np.where(disk_mask(shape, (50, 70), 14), 0.1, 0.85)
    activation = np.zeros(shape)
    activation[40:62, 58:84] = 1.0
    settings = RefineConfig(gac_iterations=0)
    estimate = localize(frame, ActivationMap(values=activation, source_grid=(4, 4)), settings)

    region = clean_mask(binarize_map(activation, settings.threshold_frac), settings.dilation_radius)
    _, hull = convex_hull(darkest_k(frame, region, settings.k_darkest), shape)
    centroid, bbox = centroid_and_bbox(hull)
    assert np.array_equal(estimate.mask, hull)
    assert estimate.centroid == centroid and estimate.bbox == bbox


def test_localize_empty_activation_is_no_detection():
    frame = np.full((30, 30), 0.5)
    assert localize(frame, ActivationMap(values=np.zeros((30, 30)), source_grid=(4, 4)), RefineConfig()) is None


def test_localize_requires_alignment():
    with pytest.raises(DataValidationError):
        localize(np.zeros((30, 30)), ActivationMap(values=np.ones((20, 20)), source_grid=(4, 4)), RefineConfig())
