"""
Report emission: CSV tables, text tables, F1-vs-IoU curves, overlays and provenance.

phase_report.csv          section,backbone,n,f1,p3_bpm,p3_uesc
phase_clips.csv           clip_id,consistency,gt_bpm,gt_uesc,pred_bpm,pred_uesc,predicted,truth
interrater.csv            event,n,r,p3
localization_report.csv   section,backbone,n,n_detected,r_y,rmse_median_iqr
localization_frames.csv   one row per evaluated frame (FRAME_COLUMNS)
trajectories.csv          clip_id,frame,pred_x,pred_y,gt_x,gt_y,landmarks_reused (spine frame, px)
f1_curve.csv              threshold,backbone,f1

Empty buckets are emitted with n=0 and empty metric cells.
"""

import json
import logging
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from skimage.segmentation import find_boundaries

from data.models.report_schemas import (
    OVERALL, ClassificationReport, ClipPhaseOutcome, FrameLocalization, InterraterRow,
    LocalizationReport, PhaseScores, SectionComparison
)
from data.processors.evaluation import SECTIONS
from data.processors.metrics import format_interrater, format_median_iqr
from data.processors.stats import format_friedman
from data.storage.clip_store import read_table, write_png, write_table

logger = logging.getLogger(__name__)

PHASE_REPORT_COLUMNS = ["section", "backbone", "n", "f1", "p3_bpm", "p3_uesc"]
PHASE_CLIP_COLUMNS = ["clip_id", "consistency", "gt_bpm", "gt_uesc", "pred_bpm", "pred_uesc", "predicted", "truth"]
INTERRATER_COLUMNS = ["event", "n", "r", "p3"]
LOCALIZATION_REPORT_COLUMNS = ["section", "backbone", "n", "n_detected", "r_y", "rmse_median_iqr"]
FRAME_COLUMNS = [
    "clip_id", "consistency", "frame", "detected",
    "gt_cx", "gt_cy", "gt_x_min", "gt_y_min", "gt_x_max", "gt_y_max",
    "pred_cx", "pred_cy", "pred_x_min", "pred_y_min", "pred_x_max", "pred_y_max",
    "gt_spine_x", "gt_spine_y", "pred_spine_x", "pred_spine_y", "d", "error", "landmarks_reused"
]
TRAJECTORY_COLUMNS = ["clip_id", "frame", "pred_x", "pred_y", "gt_x", "gt_y", "landmarks_reused"]
CURVE_COLUMNS = ["threshold", "backbone", "f1"]

PROVENANCE_PACKAGES = [
    "numpy", "scipy", "torch", "scikit-image", "opencv-python-headless", "pandas", "pillow", "pydantic"
]

YELLOW = (255, 255, 0)
GREEN = (0, 200, 0)
RED = (255, 0, 0)
CURVE_COLORS = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189), (140, 86, 75)]


# ============================================================================
# PHASE TABLES
# ============================================================================

def phase_rows(reports: Sequence[ClassificationReport]) -> List[Dict[str, Any]]:
    rows = []
    for section in SECTIONS:
        for report in reports:
            scores = report.overall if section == OVERALL else report.per_consistency.get(section)
            scores = scores or PhaseScores(n=0)
            rows.append({"section": section, "backbone": report.backbone, "n": scores.n,
                         "f1": scores.f1, "p3_bpm": scores.p3_bpm, "p3_uesc": scores.p3_uesc})
    return rows


def write_phase_report(reports: Sequence[ClassificationReport], path: Path) -> Path:
    return write_table(phase_rows(reports), PHASE_REPORT_COLUMNS, path, int_columns=["n"])


def write_phase_clips(outcomes: Sequence[ClipPhaseOutcome], path: Path) -> Path:
    rows = [o.model_dump() for o in outcomes]
    return write_table(rows, PHASE_CLIP_COLUMNS, path, int_columns=["gt_bpm", "gt_uesc", "pred_bpm", "pred_uesc"])


def read_phase_clips(path: Path) -> List[ClipPhaseOutcome]:
    table, _ = read_table(path, PHASE_CLIP_COLUMNS)
    outcomes = []
    for row in table.to_dict("records"):
        for key in ("pred_bpm", "pred_uesc"):
            row[key] = int(row[key]) if row[key].strip() else None
        outcomes.append(ClipPhaseOutcome(**row))
    return outcomes


def write_interrater(rows: Sequence[InterraterRow], path: Path) -> Path:
    return write_table([r.model_dump() for r in rows], INTERRATER_COLUMNS, path, int_columns=["n"])


def format_interrater_table(rows: Sequence[InterraterRow]) -> str:
    lines = ["Inter-rater agreement (pre-consensus)"]
    for row in rows:
        if row.r is None or row.p3 is None:
            lines.append(f"  {row.event:<5} n={row.n}  not available")
        else:
            lines.append(f"  {row.event:<5} n={row.n}  {format_interrater(row.r, row.p3)}")
    return "\n".join(lines)


def _mark_best(table: pd.DataFrame, columns: Sequence[str], lower_is_better: Sequence[str] = ()) -> pd.DataFrame:
    """Append '*' to the best value of each column within every section"""
    shown = table.copy().astype(object)
    for section, group in table.groupby("section", sort=False):
        if len(group) < 2:
            continue
        for column in columns:
            values = pd.to_numeric(group[column], errors="coerce")
            if values.isna().all():
                continue
            best = values.min() if column in lower_is_better else values.max()
            for idx in values[values == best].index:
                shown.at[idx, column] = f"{shown.at[idx, column]}*"
    return shown


def format_phase_table(reports: Sequence[ClassificationReport]) -> str:
    table = pd.DataFrame(phase_rows(reports), columns=PHASE_REPORT_COLUMNS)
    shown = table.copy().astype(object)
    shown["f1"] = [("" if pd.isna(v) else f"{v:.3f}") for v in table["f1"]]
    for column in ("p3_bpm", "p3_uesc"):
        shown[column] = [("" if pd.isna(v) else f"{v:.2f}") for v in table[column]]
    shown = _mark_best(shown, ["f1", "p3_bpm", "p3_uesc"])
    shown.columns = ["Section", "Backbone", "n", "F1-score", "P3_BPM (%)", "P3_UESC (%)"]
    return shown.to_string(index=False)


# ============================================================================
# LOCALIZATION TABLES
# ============================================================================

def localization_rows(reports: Sequence[LocalizationReport]) -> List[Dict[str, Any]]:
    rows = []
    for section in SECTIONS:
        for report in reports:
            scores = report.overall if section == OVERALL else report.per_consistency.get(section)
            rmse = None
            if scores is not None and scores.rmse_median is not None:
                rmse = format_median_iqr(scores.rmse_median, scores.rmse_q1, scores.rmse_q3)
            rows.append({
                "section": section, "backbone": report.backbone,
                "n": scores.n if scores else 0, "n_detected": scores.n_detected if scores else 0,
                "r_y": scores.r_y if scores else None, "rmse_median_iqr": rmse
            })
    return rows


def write_localization_report(reports: Sequence[LocalizationReport], path: Path) -> Path:
    return write_table(localization_rows(reports), LOCALIZATION_REPORT_COLUMNS, path, int_columns=["n", "n_detected"])


def format_localization_table(
    reports: Sequence[LocalizationReport], comparisons: Optional[Dict[str, SectionComparison]] = None
) -> str:
    table = pd.DataFrame(localization_rows(reports), columns=LOCALIZATION_REPORT_COLUMNS)
    shown = table.copy().astype(object)
    shown["r_y"] = [("" if pd.isna(v) else f"{v:.3f}") for v in table["r_y"]]
    shown["rmse_median_iqr"] = ["" if v is None or pd.isna(v) else v for v in table["rmse_median_iqr"]]
    shown = _mark_best(shown, ["r_y"])
    shown.columns = ["Section", "Backbone", "n", "Detected", "r_y", "RMSE median (IQR)"]
    text = [shown.to_string(index=False)]

    for section, comparison in (comparisons or {}).items():
        if comparison.friedman is not None:
            line = f"{section}: Friedman {format_friedman(comparison.friedman)}"
            if comparison.posthoc is not None:
                line += (f"; {comparison.posthoc.method}, CD={comparison.posthoc.critical_difference:.3f}, "
                         f"best: {comparison.posthoc.best or 'none'}")
            text.append(line)
        if comparison.note:
            text.append(f"{section}: {comparison.note}")
    return "\n".join(text)


def _frame_row(o: FrameLocalization) -> Dict[str, Any]:
    pred_c = o.pred_centroid or (None, None)
    pred_b = o.pred_bbox or (None, None, None, None)
    pred_s = o.pred_spine or (None, None)
    return {
        "clip_id": o.clip_id, "consistency": o.consistency, "frame": o.frame, "detected": int(o.detected),
        "gt_cx": o.gt_centroid[0], "gt_cy": o.gt_centroid[1],
        "gt_x_min": o.gt_bbox[0], "gt_y_min": o.gt_bbox[1], "gt_x_max": o.gt_bbox[2], "gt_y_max": o.gt_bbox[3],
        "pred_cx": pred_c[0], "pred_cy": pred_c[1],
        "pred_x_min": pred_b[0], "pred_y_min": pred_b[1], "pred_x_max": pred_b[2], "pred_y_max": pred_b[3],
        "gt_spine_x": o.gt_spine[0], "gt_spine_y": o.gt_spine[1],
        "pred_spine_x": pred_s[0], "pred_spine_y": pred_s[1],
        "d": o.d, "error": o.error, "landmarks_reused": int(o.landmarks_reused)
    }


def write_localization_frames(outcomes: Sequence[FrameLocalization], path: Path) -> Path:
    int_columns = ["frame", "detected", "gt_x_min", "gt_y_min", "gt_x_max", "gt_y_max",
                   "pred_x_min", "pred_y_min", "pred_x_max", "pred_y_max", "landmarks_reused"]
    return write_table([_frame_row(o) for o in outcomes], FRAME_COLUMNS, path, int_columns=int_columns)


def read_localization_frames(path: Path) -> List[FrameLocalization]:
    table, _ = read_table(path, FRAME_COLUMNS)
    outcomes = []
    for row in table.to_dict("records"):
        detected = row["detected"] == "1"

        def pair(a: str, b: str):
            return (float(row[a]), float(row[b])) if row[a] != "" else None

        def box(prefix: str):
            keys = [f"{prefix}_{k}" for k in ("x_min", "y_min", "x_max", "y_max")]
            return tuple(int(row[k]) for k in keys) if row[keys[0]] != "" else None

        outcomes.append(FrameLocalization(
            clip_id=row["clip_id"], consistency=row["consistency"], frame=int(row["frame"]),
            detected=detected,
            gt_centroid=pair("gt_cx", "gt_cy"), gt_bbox=box("gt"),
            pred_centroid=pair("pred_cx", "pred_cy") if detected else None,
            pred_bbox=box("pred") if detected else None,
            gt_spine=pair("gt_spine_x", "gt_spine_y"),
            pred_spine=pair("pred_spine_x", "pred_spine_y") if detected else None,
            d=float(row["d"]), error=float(row["error"]) if detected else None,
            landmarks_reused=row["landmarks_reused"] == "1"
        ))
    return outcomes


def write_trajectories(outcomes: Sequence[FrameLocalization], path: Path) -> Path:
    rows = [{
        "clip_id": o.clip_id, "frame": o.frame,
        "pred_x": o.pred_spine[0] if o.pred_spine else None,
        "pred_y": o.pred_spine[1] if o.pred_spine else None,
        "gt_x": o.gt_spine[0], "gt_y": o.gt_spine[1],
        "landmarks_reused": int(o.landmarks_reused)
    } for o in outcomes]
    return write_table(rows, TRAJECTORY_COLUMNS, path, int_columns=["frame", "landmarks_reused"])


# ============================================================================
# F1-VS-IOU CURVE
# ============================================================================

def write_f1_curve(reports: Sequence[LocalizationReport], path: Path) -> Path:
    rows = [
        {"threshold": threshold, "backbone": report.backbone, "f1": f1}
        for report in reports
        for threshold, f1 in sorted(report.overall.f1_curve.items())
    ]
    return write_table(rows, CURVE_COLUMNS, path)


def draw_f1_curve(reports: Sequence[LocalizationReport], path: Path, size=(640, 420)) -> Path:
    """Line chart of F1 against IoU threshold, one line per backbone"""
    width, height = size
    left, right, top, bottom = 60, 150, 20, 50
    image = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(image)

    thresholds = sorted({t for r in reports for t in r.overall.f1_curve})
    t_min, t_max = (thresholds[0], thresholds[-1]) if thresholds else (0.25, 0.75)
    span = (t_max - t_min) or 1.0

    def to_px(t: float, f1: float):
        x = left + (t - t_min) / span * (width - left - right)
        y = height - bottom - f1 * (height - top - bottom)
        return x, y

    draw.line([to_px(t_min, 0), to_px(t_max, 0)], fill="black")
    draw.line([to_px(t_min, 0), to_px(t_min, 1)], fill="black")
    for tick in np.linspace(0, 1, 6):
        x, y = to_px(t_min, tick)
        draw.text((x - 35, y - 6), f"{tick:.1f}", fill="black")
    for t in thresholds:
        x, y = to_px(t, 0)
        draw.text((x - 12, y + 6), f"{t:.2f}", fill="black")
    draw.text((width // 2 - 60, height - 22), "IoU threshold", fill="black")
    draw.text((5, top), "F1", fill="black")

    for i, report in enumerate(reports):
        color = CURVE_COLORS[i % len(CURVE_COLORS)]
        points = [to_px(t, f1) for t, f1 in sorted(report.overall.f1_curve.items())]
        if len(points) > 1:
            draw.line(points, fill=color, width=2)
        for x, y in points:
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=color)
        legend_y = top + 16 * i
        draw.line([(width - right + 10, legend_y + 6), (width - right + 30, legend_y + 6)], fill=color, width=2)
        draw.text((width - right + 35, legend_y), report.backbone, fill="black")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path)
    return path


# ============================================================================
# OVERLAYS
# ============================================================================

def overlay(
    frame: np.ndarray,
    pred_mask: Optional[np.ndarray] = None,
    centroid: Optional[tuple] = None,
    gt_mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """RGB frame with ground-truth outline (green), predicted outline (yellow) and centroid (red)"""
    gray = np.asarray(frame)
    if gray.dtype != np.uint8:
        gray = np.round(np.clip(gray, 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([gray] * 3, axis=-1)
    if gt_mask is not None and np.any(gt_mask):
        rgb[find_boundaries(np.asarray(gt_mask, dtype=bool), mode="inner")] = GREEN
    if pred_mask is not None and np.any(pred_mask):
        rgb[find_boundaries(np.asarray(pred_mask, dtype=bool), mode="inner")] = YELLOW
    if centroid is not None:
        image = Image.fromarray(rgb)
        x, y = centroid
        ImageDraw.Draw(image).ellipse([x - 3, y - 3, x + 3, y + 3], fill=RED)
        rgb = np.array(image)
    return rgb


def write_overlay(path: Path, frame: np.ndarray, **kwargs) -> Path:
    return write_png(overlay(frame, **kwargs), path)


# ============================================================================
# PROVENANCE
# ============================================================================

def package_versions() -> Dict[str, Optional[str]]:
    versions = {}
    for name in PROVENANCE_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_provenance(out_dir: Path, subcommand: str, argv: Sequence[str], settings: Dict[str, Any], seed: int) -> Path:
    """provenance.json beside a subcommand's outputs"""
    path = Path(out_dir) / "provenance.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "subcommand": subcommand,
        "argv": list(argv),
        "config": settings,
        "seed": seed,
        "python": platform.python_version(),
        "packages": package_versions()
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path
