#!/usr/bin/env python3
"""
Test Pipeline
Command-line subcommands, exit codes, provenance and the clip worker pool
"""

import asyncio
import json
import time

import numpy as np
import pandas as pd
import pytest

from data.mock_data.phantom_generator import PhantomGenerator
from data.models.schemas import BolusEstimate
from data.pipeline.pipeline_manager import PipelineManager
from data.processors.bolus_localizer import centroid_and_bbox
from data.processors.dataset import label_frames
from data.storage import clip_store
from main import EXIT_DATA, EXIT_OK, EXIT_USAGE, run_subcommand


@pytest.fixture(scope="module")
def phantom(tmp_path_factory):
    """Five single-clip subjects, one per consistency"""
    root = tmp_path_factory.mktemp("phantom")
    paths = PhantomGenerator().generate_dataset(root, n_subjects=5, clips_per_subject=1, seed=4)
    entries = clip_store.load_manifest(paths["manifest"])
    annotations = clip_store.load_annotations(paths["annotations"], entries)
    return root, paths, entries, annotations


def perfect_probs(directory, entries, annotations):
    for entry in entries:
        sequence = label_frames(annotations[entry.clip_id], entry.n_frames)
        probs = np.where(sequence.is_p(), 0.95, 0.05)
        clip_store.write_probs(sequence, probs, directory / f"{entry.clip_id}.csv")
    return directory


def perfect_bolus(directory, entries, masks_dir):
    for entry in entries:
        estimates = {}
        for t, mask in clip_store.load_masks(masks_dir, entry.clip_id).items():
            centroid, bbox = centroid_and_bbox(mask)
            estimates[t] = BolusEstimate(mask=mask, centroid=centroid, bbox=bbox, frame_id=t)
        clip_store.write_bolus(estimates, directory / entry.clip_id / "bolus.csv")
    return directory


# ============================================================================
# EXIT CODES
# ============================================================================

def test_usage_errors_exit_1(capsys):
    assert run_subcommand([]) == EXIT_USAGE
    assert run_subcommand(["bogus"]) == EXIT_USAGE
    assert run_subcommand(["split", "--manifest", "m.csv"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_bad_input_exits_2(tmp_path, capsys):
    assert run_subcommand(["ingest", "--manifest", str(tmp_path / "absent.csv")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert err.startswith("data error:") and len(err.strip().splitlines()) == 1

    assert run_subcommand(["phantom", "--out-dir", str(tmp_path), "--subjects", "0"]) == EXIT_DATA
    assert run_subcommand(["ingest", "--manifest", "m.csv", "--net-size", "8"]) == EXIT_DATA


def test_help_exits_0():
    assert run_subcommand(["--help"]) == EXIT_OK


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def test_ingest_describes_dataset(phantom, tmp_path):
    _, paths, entries, _ = phantom
    out = tmp_path / "ingest"
    code = run_subcommand([
        "ingest", "--manifest", str(paths["manifest"]), "--annotations", str(paths["annotations"]), "--out-dir", str(out)
    ])
    assert code == EXIT_OK
    table = pd.read_csv(out / "dataset.csv")
    overall = table[table["consistency"] == "overall"].iloc[0]
    assert overall["clips"] == 5 and overall["subjects"] == 5
    assert overall["frames"] == sum(e.n_frames for e in entries)
    assert 0 < overall["p_share"] < 1
    assert json.loads((out / "provenance.json").read_text())["subcommand"] == "ingest"


def test_split_writes_partition_file(phantom, tmp_path):
    _, paths, _, _ = phantom
    out = tmp_path / "split.csv"
    assert run_subcommand(["split", "--manifest", str(paths["manifest"]), "--seed", "2", "--out", str(out)]) == EXIT_OK
    split = clip_store.load_split(out)
    assert (len(split.train_clips), len(split.val_clips), len(split.test_clips)) == (3, 1, 1)
    assert split.seed == 2
    assert run_subcommand(["split", "--manifest", str(paths["manifest"]), "--ratios", "0.5,0.5", "--out", str(out)]) == EXIT_USAGE


def test_eval_phase_on_perfect_predictions(phantom, tmp_path):
    _, paths, entries, annotations = phantom
    probs_dir = perfect_probs(tmp_path / "probs", entries, annotations)
    out = tmp_path / "eval"
    code = run_subcommand([
        "eval-phase", "--manifest", str(paths["manifest"]), "--annotations", str(paths["annotations"]),
        "--probs-dir", str(probs_dir), "--backbone", "oracle", "--out-dir", str(out)
    ])
    assert code == EXIT_OK
    report = pd.read_csv(out / "phase_report.csv")
    overall = report[report["section"] == "overall"].iloc[0]
    assert (overall["n"], overall["f1"], overall["p3_bpm"], overall["p3_uesc"]) == (5, 1.0, 100.0, 100.0)
    assert set(report["section"]) == {"overall", "thin", "slightly_thick", "mildly_thick", "moderately_thick", "extremely_thick"}
    assert (out / "interrater.csv").is_file()
    assert (out / "provenance.json").is_file()


def test_decode_directory(phantom, tmp_path):
    _, _, entries, annotations = phantom
    probs_dir = perfect_probs(tmp_path / "probs", entries, annotations)
    out = tmp_path / "events.csv"
    assert run_subcommand(["decode", "--probs", str(probs_dir), "--out", str(out)]) == EXIT_OK
    events = clip_store.read_events(out)
    for clip_id, annotation in annotations.items():
        assert (events[clip_id].bpm, events[clip_id].uesc) == (annotation.bpm_frame, annotation.uesc_frame)


def test_decode_single_probs_file_uses_directory_name(phantom, tmp_path):
    _, _, entries, annotations = phantom
    entry = entries[0]
    single = tmp_path / entry.clip_id
    single.mkdir()
    sequence = label_frames(annotations[entry.clip_id], entry.n_frames)
    clip_store.write_probs(sequence, np.where(sequence.is_p(), 0.9, 0.1), single / "probs.csv")
    out = tmp_path / "events.csv"
    assert run_subcommand(["decode", "--probs", str(single / "probs.csv"), "--out", str(out)]) == EXIT_OK
    assert list(clip_store.read_events(out)) == [entry.clip_id]


def test_eval_localize_and_report_on_perfect_boxes(phantom, tmp_path):
    root, paths, entries, _ = phantom
    bolus_dir = perfect_bolus(tmp_path / "bolus", entries, paths["masks"])
    evals = {}
    for name in ("first", "second"):
        evals[name] = tmp_path / name
        code = run_subcommand([
            "eval-localize", "--manifest", str(paths["manifest"]), "--annotations", str(paths["annotations"]),
            "--landmarks", str(paths["landmarks"]), "--bolus-dir", str(bolus_dir), "--backbone", name,
            "--out-dir", str(evals[name])
        ] + (["--overlays"] if name == "first" else []))
        assert code == EXIT_OK

    report = pd.read_csv(evals["first"] / "localization_report.csv")
    overall = report[report["section"] == "overall"].iloc[0]
    assert overall["n"] == overall["n_detected"] > 0
    assert overall["r_y"] == pytest.approx(1.0)
    assert overall["rmse_median_iqr"] == "0.000 (0.000-0.000)"
    curve = pd.read_csv(evals["first"] / "f1_curve.csv")
    assert (curve["f1"] == 1.0).all()
    assert any((evals["first"] / "overlays").rglob("*.png"))
    assert (evals["first"] / "trajectories.csv").is_file()

    out = tmp_path / "report"
    code = run_subcommand([
        "report", "--input", f"first={evals['first']}", "--input", f"second={evals['second']}", "--out-dir", str(out)
    ])
    assert code == EXIT_OK
    text = (out / "report.txt").read_text()
    assert "not significant" in text
    assert (out / "f1_curve.png").is_file()


def test_report_needs_evaluation_outputs(tmp_path):
    assert run_subcommand(["report", "--input", f"x={tmp_path}", "--out-dir", str(tmp_path / "out")]) == EXIT_DATA


def test_phantom_subcommand_with_workers(tmp_path):
    out = tmp_path / "ph"
    code = run_subcommand([
        "phantom", "--out-dir", str(out), "--subjects", "2", "--clips-per-subject", "1", "--seed", "1", "--workers", "2"
    ])
    assert code == EXIT_OK
    assert [e.clip_id for e in clip_store.load_manifest(out / "manifest.csv")] == ["S001_C01", "S002_C01"]
    assert json.loads((out / "provenance.json").read_text())["seed"] == 1


# ============================================================================
# WORKER POOL
# ============================================================================

@pytest.mark.asyncio
async def test_map_clips_keeps_input_order():
    def job(delay):
        time.sleep(delay)
        return delay

    delays = [0.05, 0.01, 0.03, 0.0]
    assert await PipelineManager().map_clips(delays, job, workers=3) == delays


@pytest.mark.asyncio
async def test_map_clips_bounds_concurrency():
    active, peak = 0, 0
    lock = asyncio.Lock()
    loop = asyncio.get_running_loop()

    async def track(delta):
        nonlocal active, peak
        async with lock:
            active += delta
            peak = max(peak, active)

    def job(_):
        asyncio.run_coroutine_threadsafe(track(1), loop).result()
        time.sleep(0.02)
        asyncio.run_coroutine_threadsafe(track(-1), loop).result()

    await PipelineManager().map_clips(list(range(8)), job, workers=2)
    assert peak <= 2


# ============================================================================
# END TO END
# ============================================================================

@pytest.mark.slow
def test_end_to_end_on_phantom(phantom, tmp_path):
    root, paths, entries, annotations = phantom
    common = ["--profile", "fast", "--seed", "0"]
    split = tmp_path / "split.csv"
    ckpt = tmp_path / "ckpt"
    probs = tmp_path / "probs"
    bolus = tmp_path / "bolus"

    assert run_subcommand(["split", "--manifest", str(paths["manifest"]), "--out", str(split)] + common) == EXIT_OK
    assert run_subcommand([
        "train", "--manifest", str(paths["manifest"]), "--annotations", str(paths["annotations"]),
        "--split", str(split), "--arch", "cnn3", "--epochs", "2", "--out", str(ckpt)
    ] + common) == EXIT_OK
    assert (ckpt / "checkpoint.json").is_file()

    selection = ["--manifest", str(paths["manifest"]), "--split", str(split), "--partition", "test"]
    assert run_subcommand(["predict", "--ckpt", str(ckpt), "--out-dir", str(probs)] + selection + common) == EXIT_OK
    assert run_subcommand([
        "eval-phase", "--annotations", str(paths["annotations"]), "--probs-dir", str(probs),
        "--out-dir", str(tmp_path / "eval-phase")
    ] + selection + common) == EXIT_OK
    assert run_subcommand(["localize", "--ckpt", str(ckpt), "--out-dir", str(bolus)] + selection + common) == EXIT_OK
    assert run_subcommand([
        "eval-localize", "--annotations", str(paths["annotations"]), "--landmarks", str(paths["landmarks"]),
        "--bolus-dir", str(bolus), "--out-dir", str(tmp_path / "eval-loc")
    ] + selection + common) == EXIT_OK
    assert (tmp_path / "eval-loc" / "localization_report.csv").is_file()

    test_clip = clip_store.load_split(split).test_clips[0]
    entry = next(e for e in entries if e.clip_id == test_clip)
    cam_dir = tmp_path / "cam"
    assert run_subcommand(["cam", "--ckpt", str(ckpt), "--clip", str(entry.path), "--out-dir", str(cam_dir)] + common) == EXIT_OK
    assert len(list(cam_dir.glob("*.png"))) == entry.n_frames
