"""
File-based storage for clips, annotations, landmarks and CSV intermediates.

Manifest:     clip_id,subject_id,consistency,path,n_frames,fps
Annotations:  #index_base=0|1 directive line, then
              clip_id,bpm,uesc[,rater_a_bpm,rater_a_uesc,rater_b_bpm,rater_b_uesc]
Landmarks:    clip_id,frame,c2x,c2y,c4x,c4y (optional #index_base directive)
Split:        clip_id,subject_id,partition
Probs:        frame,prob_p,pred
Events:       clip_id,bpm,uesc
CAM sidecar:  frame,target_class,max_raw_value
Bolus:        frame,cx,cy,x_min,y_min,x_max,y_max,detected

All frame indices are 0-based in memory and in every file this module writes.
"""

import io
import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd
from PIL import Image
from pydantic import ValidationError

from data.models.errors import DataValidationError
from data.models.schemas import (
    BolusEstimate, ClipAnnotation, ClipManifestEntry, DatasetSplit,
    PhaseDetection, PhaseSequence, SpineLandmarks
)

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["clip_id", "subject_id", "consistency", "path", "n_frames", "fps"]
ANNOTATION_COLUMNS = ["clip_id", "bpm", "uesc"]
RATER_COLUMNS = ["rater_a_bpm", "rater_a_uesc", "rater_b_bpm", "rater_b_uesc"]
LANDMARK_COLUMNS = ["clip_id", "frame", "c2x", "c2y", "c4x", "c4y"]
SPLIT_COLUMNS = ["clip_id", "subject_id", "partition"]
PROBS_COLUMNS = ["frame", "prob_p", "pred"]
EVENTS_COLUMNS = ["clip_id", "bpm", "uesc"]
CAM_COLUMNS = ["frame", "target_class", "max_raw_value"]
BOLUS_COLUMNS = ["frame", "cx", "cy", "x_min", "y_min", "x_max", "y_max", "detected"]

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
FLOAT_FORMAT = "%.6f"
_DIRECTIVE = re.compile(r"^#\s*index_base\s*=\s*([01])\s*$")


# ============================================================================
# CSV HELPERS
# ============================================================================

def read_table(path: Path, required: Sequence[str], require_directive: bool = False) -> Tuple[pd.DataFrame, int]:
    """Read a CSV as strings; returns (table, index_base) honoring an optional directive line"""
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"File not found: {path}")
    text = path.read_text(encoding="utf-8")
    index_base = 0
    lines = text.splitlines()
    if lines and lines[0].startswith("#"):
        match = _DIRECTIVE.match(lines[0])
        if not match:
            raise DataValidationError(f"{path}: unrecognized directive {lines[0]!r}")
        index_base = int(match.group(1))
        text = "\n".join(lines[1:])
    elif require_directive:
        raise DataValidationError(f"{path}: annotation files must start with #index_base=0 or #index_base=1")

    table = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
    table.columns = [c.strip() for c in table.columns]
    missing = [c for c in required if c not in table.columns]
    if missing:
        raise DataValidationError(f"{path}: missing columns {missing}")
    return table, index_base


def _optional_int(value: str) -> Optional[int]:
    value = value.strip()
    return None if value == "" else int(value)


def write_table(
    rows: List[dict], columns: Sequence[str], path: Path,
    header_line: Optional[str] = None, int_columns: Sequence[str] = ()
) -> Path:
    """Deterministic CSV: fixed column order, "\\n" endings, %.6f floats, empty cells for missing values"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(rows, columns=list(columns))
    for column in int_columns:
        table[column] = pd.array(table[column].tolist(), dtype="Int64")
    body = table.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="")
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if header_line:
            handle.write(header_line + "\n")
        handle.write(body)
    return path


# ============================================================================
# FRAMES AND IMAGES
# ============================================================================

def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.array(image.convert("L"), dtype=np.uint8)


def write_png(array: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    mode = "RGB" if array.ndim == 3 else "L"
    Image.fromarray(array.astype(np.uint8), mode=mode).save(path)
    return path


def _frame_files(directory: Path) -> List[Path]:
    files = [p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]

    def number(p: Path) -> Tuple[int, str]:
        digits = re.findall(r"\d+", p.stem)
        return (int(digits[-1]) if digits else -1, p.name)

    return sorted(files, key=number)


def count_frames(path: Path) -> int:
    path = Path(path)
    if path.is_dir():
        return len(_frame_files(path))
    if path.is_file():
        capture = cv2.VideoCapture(str(path))
        try:
            return int(capture.get(cv2.CAP_PROP_FRAME_COUNT))
        finally:
            capture.release()
    raise DataValidationError(f"Clip path does not exist: {path}")


def read_frames(path: Path) -> List[np.ndarray]:
    """8-bit grayscale frames of a clip (frame directory or video file)"""
    path = Path(path)
    if path.is_dir():
        return [read_png(p) for p in _frame_files(path)]
    if not path.is_file():
        raise DataValidationError(f"Clip path does not exist: {path}")
    capture = cv2.VideoCapture(str(path))
    frames = []
    try:
        while True:
            ok, frame = capture.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2GRAY) if frame.ndim == 3 else frame)
    finally:
        capture.release()
    if not frames:
        raise DataValidationError(f"No frames could be decoded from {path}")
    return frames


def load_masks(mask_dir: Path, clip_id: str) -> Dict[int, np.ndarray]:
    """Ground-truth bolus masks stored as <mask_dir>/<clip_id>/<frame>.png"""
    clip_dir = Path(mask_dir) / clip_id
    if not clip_dir.is_dir():
        return {}
    masks = {}
    for path in _frame_files(clip_dir):
        masks[int(re.findall(r"\d+", path.stem)[-1])] = read_png(path) > 127
    return masks


# ============================================================================
# MANIFEST / ANNOTATIONS / LANDMARKS
# ============================================================================

def load_manifest(path: Path, check_frames: bool = True) -> List[ClipManifestEntry]:
    path = Path(path)
    table, _ = read_table(path, MANIFEST_COLUMNS)
    entries: List[ClipManifestEntry] = []
    seen = set()
    for line_no, row in enumerate(table.to_dict("records"), start=2):
        clip_id = row["clip_id"].strip()
        if clip_id in seen:
            raise DataValidationError(f"{path}:{line_no}: duplicate clip_id {clip_id!r}")
        seen.add(clip_id)
        clip_path = Path(row["path"].strip())
        if not clip_path.is_absolute():
            clip_path = path.parent / clip_path
        try:
            entry = ClipManifestEntry(
                clip_id=clip_id,
                subject_id=row["subject_id"].strip(),
                consistency=row["consistency"].strip(),
                path=clip_path,
                n_frames=int(row["n_frames"]),
                fps=float(row["fps"]) if row["fps"].strip() else 30.0
            )
        except (ValidationError, ValueError) as e:
            raise DataValidationError(f"{path}:{line_no}: {e}") from e
        if check_frames:
            on_disk = count_frames(entry.path)
            if on_disk != entry.n_frames:
                raise DataValidationError(
                    f"{path}:{line_no}: clip {clip_id} declares {entry.n_frames} frames but {on_disk} found"
                )
        entries.append(entry)
    logger.info(f"Loaded {len(entries)} clips from {path}")
    return entries


def write_manifest(entries: Iterable[ClipManifestEntry], path: Path) -> Path:
    path = Path(path)
    rows = []
    for entry in entries:
        try:
            clip_path = entry.path.relative_to(path.parent)
        except ValueError:
            clip_path = entry.path
        rows.append({
            "clip_id": entry.clip_id, "subject_id": entry.subject_id,
            "consistency": entry.consistency.value, "path": clip_path.as_posix(),
            "n_frames": entry.n_frames, "fps": entry.fps
        })
    return write_table(rows, MANIFEST_COLUMNS, path)


def load_annotations(
    path: Path, manifest: Optional[Sequence[ClipManifestEntry]] = None
) -> Dict[str, ClipAnnotation]:
    path = Path(path)
    table, base = read_table(path, ANNOTATION_COLUMNS, require_directive=True)
    frames_by_clip = {entry.clip_id: entry.n_frames for entry in manifest or []}
    has_raters = all(c in table.columns for c in RATER_COLUMNS)

    annotations: Dict[str, ClipAnnotation] = {}
    for line_no, row in enumerate(table.to_dict("records"), start=3):
        clip_id = row["clip_id"].strip()
        if clip_id in annotations:
            raise DataValidationError(f"{path}:{line_no}: duplicate annotation for {clip_id!r}")

        def index(column: str) -> Optional[int]:
            value = _optional_int(row[column]) if column in row else None
            return None if value is None else value - base

        try:
            annotation = ClipAnnotation(
                clip_id=clip_id,
                bpm_frame=index("bpm"),
                uesc_frame=index("uesc"),
                **({c: index(c) for c in RATER_COLUMNS} if has_raters else {})
            )
            if manifest is not None:
                if clip_id not in frames_by_clip:
                    raise ValueError(f"clip {clip_id!r} is not in the manifest")
                annotation.check_frame_count(frames_by_clip[clip_id])
        except (ValidationError, ValueError, TypeError) as e:
            raise DataValidationError(f"{path}:{line_no}: {e}") from e
        annotations[clip_id] = annotation
    return annotations


def write_annotations(annotations: Iterable[ClipAnnotation], path: Path, index_base: int = 0) -> Path:
    annotations = list(annotations)
    with_raters = any(a.has_raters for a in annotations)
    columns = ANNOTATION_COLUMNS + (RATER_COLUMNS if with_raters else [])

    def shift(value: Optional[int]) -> Optional[int]:
        return None if value is None else value + index_base

    rows = []
    for a in annotations:
        row = {"clip_id": a.clip_id, "bpm": shift(a.bpm_frame), "uesc": shift(a.uesc_frame)}
        if with_raters:
            row.update({c: shift(getattr(a, c)) for c in RATER_COLUMNS})
        rows.append(row)
    return write_table(
        rows, columns, path, header_line=f"#index_base={index_base}", int_columns=columns[1:]
    )


def load_landmarks(path: Path) -> Dict[str, Dict[int, SpineLandmarks]]:
    path = Path(path)
    table, base = read_table(path, LANDMARK_COLUMNS)
    landmarks: Dict[str, Dict[int, SpineLandmarks]] = {}
    for line_no, row in enumerate(table.to_dict("records"), start=2):
        try:
            point = SpineLandmarks(
                c2=(float(row["c2x"]), float(row["c2y"])),
                c4=(float(row["c4x"]), float(row["c4y"]))
            )
            frame = int(row["frame"]) - base
        except (ValidationError, ValueError) as e:
            raise DataValidationError(f"{path}:{line_no}: {e}") from e
        landmarks.setdefault(row["clip_id"].strip(), {})[frame] = point
    return landmarks


def write_landmarks(landmarks: Dict[str, Dict[int, SpineLandmarks]], path: Path) -> Path:
    rows = [
        {"clip_id": clip_id, "frame": frame, "c2x": point.c2[0], "c2y": point.c2[1],
         "c4x": point.c4[0], "c4y": point.c4[1]}
        for clip_id, frames in landmarks.items()
        for frame, point in sorted(frames.items())
    ]
    return write_table(rows, LANDMARK_COLUMNS, path)


# ============================================================================
# SPLITS AND PIPELINE INTERMEDIATES
# ============================================================================

def write_split(split: DatasetSplit, entries: Sequence[ClipManifestEntry], path: Path) -> Path:
    partition_of = {clip: name for name in ("train", "val", "test") for clip in split.partition(name)}
    rows = [
        {"clip_id": e.clip_id, "subject_id": e.subject_id, "partition": partition_of[e.clip_id]}
        for e in entries if e.clip_id in partition_of
    ]
    return write_table(rows, SPLIT_COLUMNS, path, header_line=f"#seed={split.seed}")


def load_split(path: Path) -> DatasetSplit:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"File not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    seed = 0
    if lines and lines[0].startswith("#seed="):
        seed = int(lines[0].split("=", 1)[1])
        lines = lines[1:]
    table = pd.read_csv(io.StringIO("\n".join(lines)), dtype=str, keep_default_na=False)
    clips: Dict[str, List[str]] = {"train": [], "val": [], "test": []}
    subjects: Dict[str, str] = {}
    for row in table.to_dict("records"):
        if row["partition"] not in clips:
            raise DataValidationError(f"{path}: unknown partition {row['partition']!r}")
        clips[row["partition"]].append(row["clip_id"])
        subjects[row["subject_id"]] = row["partition"]
    try:
        return DatasetSplit(
            train_clips=clips["train"], val_clips=clips["val"], test_clips=clips["test"],
            seed=seed, subjects=subjects
        )
    except ValidationError as e:
        raise DataValidationError(f"{path}: {e}") from e


def write_probs(sequence: PhaseSequence, probs: np.ndarray, path: Path) -> Path:
    rows = [
        {"frame": i, "prob_p": float(p), "pred": label.value}
        for i, (p, label) in enumerate(zip(probs, sequence.labels))
    ]
    return write_table(rows, PROBS_COLUMNS, path)


def probs_clip_id(path: Path) -> str:
    """Clip id of a probability file: its stem, or the enclosing directory for a single-clip probs.csv"""
    path = Path(path)
    if path.stem == "probs":
        return path.resolve().parent.name
    return path.stem


def read_probs(path: Path) -> Tuple[PhaseSequence, np.ndarray]:
    table, _ = read_table(Path(path), PROBS_COLUMNS)
    table = table.assign(frame=table["frame"].astype(int)).sort_values("frame")
    if len(table) == 0:
        raise DataValidationError(f"{path}: no frames")
    return PhaseSequence.from_string("".join(table["pred"])), table["prob_p"].astype(float).to_numpy()


def write_events(events: Dict[str, PhaseDetection], path: Path) -> Path:
    rows = [{"clip_id": clip_id, "bpm": d.bpm, "uesc": d.uesc} for clip_id, d in events.items()]
    return write_table(rows, EVENTS_COLUMNS, path, int_columns=["bpm", "uesc"])


def read_events(path: Path) -> Dict[str, PhaseDetection]:
    table, _ = read_table(Path(path), EVENTS_COLUMNS)
    return {
        row["clip_id"]: PhaseDetection(bpm=_optional_int(row["bpm"]), uesc=_optional_int(row["uesc"]))
        for row in table.to_dict("records")
    }


def write_cam_sidecar(rows: List[dict], path: Path) -> Path:
    return write_table(rows, CAM_COLUMNS, path)


def write_bolus(estimates: Dict[int, Optional[BolusEstimate]], path: Path) -> Path:
    rows = []
    for frame, estimate in sorted(estimates.items()):
        if estimate is None:
            rows.append({"frame": frame, "cx": None, "cy": None, "x_min": None, "y_min": None,
                         "x_max": None, "y_max": None, "detected": 0})
        else:
            x_min, y_min, x_max, y_max = estimate.bbox
            rows.append({"frame": frame, "cx": estimate.centroid[0], "cy": estimate.centroid[1],
                         "x_min": x_min, "y_min": y_min, "x_max": x_max, "y_max": y_max, "detected": 1})
    return write_table(rows, BOLUS_COLUMNS, path, int_columns=BOLUS_COLUMNS[3:])


def read_bolus(path: Path) -> Dict[int, Optional[dict]]:
    """frame -> {'centroid': (x, y), 'bbox': (...)} or None when not detected"""
    table, _ = read_table(Path(path), BOLUS_COLUMNS)
    result: Dict[int, Optional[dict]] = {}
    for row in table.to_dict("records"):
        frame = int(row["frame"])
        if row["detected"].strip() != "1":
            result[frame] = None
            continue
        result[frame] = {
            "centroid": (float(row["cx"]), float(row["cy"])),
            "bbox": tuple(int(row[c]) for c in ("x_min", "y_min", "x_max", "y_max"))
        }
    return result
