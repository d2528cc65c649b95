#!/usr/bin/env python3
"""
Test Phantom Generator
Synthetic clips with known swallow timing, bolus masks and landmarks
"""

import numpy as np
import pytest

from data.mock_data.phantom_generator import PhantomGenerator
from data.models.errors import DataValidationError
from data.models.schemas import Consistency, Difficulty, PhantomConfig
from data.processors.dataset import label_frames
from data.processors.temporal_decoder import decode
from data.storage.clip_store import load_annotations, load_landmarks, load_manifest, load_masks, read_frames


@pytest.fixture
def generator():
    return PhantomGenerator()


def test_clip_is_deterministic(generator):
    config = PhantomConfig(seed=3, subject_seed=4)
    a = generator.generate_clip(config)
    b = generator.generate_clip(config)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    c = generator.generate_clip(config.model_copy(update={"seed": 5}))
    assert any(not np.array_equal(x, y) for x, y in zip(a.frames, c.frames))


def test_clip_shapes_and_truth_window(generator):
    clip = generator.generate_clip(PhantomConfig(), "demo")
    assert len(clip.frames) == 60
    assert clip.frames[0].shape == (480, 720) and clip.frames[0].dtype == np.uint8
    assert clip.truth.clip_id == "demo"
    assert (clip.truth.bpm_frame, clip.truth.uesc_frame) == (20, 40)
    assert sorted(clip.truth.bolus_masks) == list(range(20, 41))
    assert sorted(clip.truth.spine) == list(range(20, 41))
    assert len(clip.centroids) == 60


def test_mask_centroid_follows_analytic_path(generator):
    clip = generator.generate_clip(PhantomConfig())
    for t, mask in clip.truth.bolus_masks.items():
        rows, cols = np.nonzero(mask)
        cx, cy = clip.centroids[t]
        assert abs(cols.mean() - cx) <= 0.5 and abs(rows.mean() - cy) <= 0.5


def test_bolus_is_darker_than_background(generator):
    clip = generator.generate_clip(PhantomConfig(noise_sigma=0.0))
    t = 30
    mask = clip.truth.bolus_masks[t]
    frame = clip.frames[t].astype(float)
    assert frame[mask].mean() < 0.5 * frame[~mask].mean()


def test_phase_labels_decode_to_truth(generator):
    clip = generator.generate_clip(PhantomConfig())
    detection = decode(label_frames(clip.truth, len(clip.frames)))
    assert (detection.bpm, detection.uesc) == (20, 40)


def test_path_outside_frame_rejected(generator):
    with pytest.raises(DataValidationError):
        generator.generate_clip(PhantomConfig(oral_start=(5.0, 5.0)))


def test_thicker_consistency_means_longer_phase(generator):
    template = PhantomConfig()
    thin = [generator.clip_config(template, Consistency.THIN, Difficulty.STANDARD, 0, s, 0) for s in range(10)]
    thick = [generator.clip_config(template, Consistency.EXTREMELY_THICK, Difficulty.STANDARD, 0, s, 0) for s in range(10)]
    assert np.mean([c.exit_frame - c.entry_frame for c in thick]) > np.mean([c.exit_frame - c.entry_frame for c in thin])
    assert thin[0].elongation > thick[0].elongation


def test_difficulty_presets(generator):
    hard = generator.clip_config(PhantomConfig(), Consistency.THIN, Difficulty.HARD, 0, 0, 0)
    assert (hard.noise_sigma, hard.bolus_contrast, hard.distractors) == (0.05, 0.4, 2)
    generator.generate_clip(hard)


def test_plan_covers_all_consistencies(generator):
    plan = generator.plan_dataset(5, 2, seed=1)
    assert [clip_id for clip_id, _, _ in plan][:3] == ["S001_C01", "S001_C02", "S002_C01"]
    assert {config.consistency for _, _, config in plan} == set(Consistency)
    assert plan == generator.plan_dataset(5, 2, seed=1)
    with pytest.raises(DataValidationError):
        generator.plan_dataset(0, 2)


def test_rater_annotation_jitter(generator):
    truth = generator.generate_clip(PhantomConfig()).truth
    for seed in range(20):
        rated = generator.rater_annotation(truth, 60, seed)
        assert rated.has_raters
        assert abs(rated.rater_a_bpm - truth.bpm_frame) <= 2
        assert abs(rated.rater_b_bpm - truth.bpm_frame) <= 4
        assert rated.rater_a_uesc >= rated.rater_a_bpm and rated.rater_b_uesc >= rated.rater_b_bpm
        assert (rated.bpm_frame, rated.uesc_frame) == (truth.bpm_frame, truth.uesc_frame)


def test_dataset_on_disk_loads_back(generator, tmp_path):
    paths = generator.generate_dataset(tmp_path, n_subjects=5, clips_per_subject=1, seed=2)
    entries = load_manifest(paths["manifest"])
    assert len(entries) == 5
    assert {e.consistency for e in entries} == set(Consistency)

    annotations = load_annotations(paths["annotations"], entries)
    landmarks = load_landmarks(paths["landmarks"])
    first = entries[0]
    annotation = annotations[first.clip_id]
    masks = load_masks(paths["masks"], first.clip_id)
    assert sorted(masks) == list(range(annotation.bpm_frame, annotation.uesc_frame + 1))
    assert sorted(landmarks[first.clip_id]) == sorted(masks)
    assert len(read_frames(first.path)) == first.n_frames
