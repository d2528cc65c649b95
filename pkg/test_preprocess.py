#!/usr/bin/env python3
"""
Test Preprocess
Center crop, CLAHE, normalization and bilinear resize
"""

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import entropy

from data.models.errors import DataValidationError
from data.models.schemas import PreprocessConfig
from data.processors.preprocess import (
    bilinear_resize, center_crop, clahe, crop_offsets, normalize, preprocess_frame, resize_to_net, to_net_input
)


def test_crop_offsets_and_shape():
    assert crop_offsets(480, 720) == (69, 189)
    frame = np.arange(480 * 720, dtype=np.int64).reshape(480, 720) % 256
    cropped = center_crop(frame.astype(np.uint8))
    assert cropped.shape == (341, 341)
    assert cropped[0, 0] == frame[69, 189] % 256


def test_crop_identity_when_same_size():
    frame = np.random.default_rng(0).integers(0, 256, size=(341, 341), dtype=np.uint8)
    assert np.array_equal(center_crop(frame), frame)


def test_crop_too_small():
    with pytest.raises(DataValidationError):
        center_crop(np.zeros((300, 720), dtype=np.uint8))


def test_clahe_constant_frame_stays_constant():
    frame = np.full((341, 341), 120, dtype=np.uint8)
    out = clahe(frame)
    assert out.dtype == np.uint8
    assert len(np.unique(out)) == 1


def test_clahe_increases_contrast_of_narrow_histogram():
    rng = np.random.default_rng(1)
    frame = rng.integers(100, 110, size=(341, 341)).astype(np.uint8)
    assert np.ptp(clahe(frame, clip_limit=4.0)) > np.ptp(frame)


def histogram_entropy(frame):
    counts = np.bincount(frame.ravel(), minlength=256)
    return entropy(counts, base=2)


def test_clahe_does_not_lower_entropy_of_two_level_frame():
    rng = np.random.default_rng(5)
    frame = np.where(rng.random((341, 341)) < 0.5, 100, 110).astype(np.uint8)
    out = clahe(frame)
    assert histogram_entropy(out) >= histogram_entropy(frame) - 1e-12
    assert np.array_equal(out, clahe(frame))


def test_clahe_bad_arguments():
    frame = np.zeros((64, 64), dtype=np.uint8)
    with pytest.raises(DataValidationError):
        clahe(frame, clip_limit=0)
    with pytest.raises(DataValidationError):
        clahe(frame, tile_grid=(0, 8))
    with pytest.raises(DataValidationError):
        clahe(frame.astype(np.float32))


def test_normalize_range():
    frame = np.zeros((341, 341), dtype=np.uint8)
    frame[0, 1] = 255
    out = normalize(frame)
    assert out.dtype == np.float64
    assert out.max() == 1.0 and out.min() == 0.0
    frame[5, 5] = 51
    assert normalize(frame)[5, 5] == pytest.approx(0.2, abs=1e-9)


def test_bilinear_upsample_hand_values():
    out = bilinear_resize(np.array([[0.0, 1.0], [1.0, 0.0]]), 4, 4)
    assert out[0] == pytest.approx([0.0, 0.25, 0.75, 1.0])
    assert out[1] == pytest.approx([0.25, 0.375, 0.625, 0.75])
    assert out.min() >= 0 and out.max() <= 1


def test_resize_to_net():
    out = resize_to_net(np.full((341, 341), 0.5), 224)
    assert out.shape == (224, 224) and out.dtype == np.float32
    assert np.allclose(out, 0.5)
    with pytest.raises(DataValidationError):
        resize_to_net(np.zeros((341, 341)), 16)


def test_preprocess_pipeline_shapes():
    raw = np.random.default_rng(2).integers(0, 256, size=(480, 720), dtype=np.uint8)
    settings = PreprocessConfig(net_size=112)
    proc, net = to_net_input(raw, settings)
    assert proc.shape == (341, 341) and net.shape == (112, 112)
    assert np.array_equal(proc, preprocess_frame(raw, settings))
    assert 0 <= net.min() and net.max() <= 1


def test_net_size_floor_enforced():
    with pytest.raises(ValidationError):
        PreprocessConfig(net_size=16)
