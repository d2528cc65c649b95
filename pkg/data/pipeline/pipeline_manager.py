import asyncio
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd

from data.mock_data.phantom_generator import phantom_generator
from data.models.errors import DataValidationError
from data.models.report_schemas import OVERALL, ClipPhaseOutcome, FrameLocalization, SectionComparison
from data.models.schemas import (
    BolusEstimate, ClipAnnotation, ClipManifestEntry, Consistency, DatasetSplit, Difficulty,
    ModelCheckpoint, PhaseDetection, PhaseLabel, PipelineConfig
)
from data.processors import evaluation
from data.processors.bolus_localizer import localize
from data.processors.cam import GradCAM, upsample_map
from data.processors.dataset import label_frames, subject_split
from data.processors.metrics import default_thresholds
from data.processors.phase_classifier import build_classifier, model_from_checkpoint, predict_clip, train
from data.processors.preprocess import crop_offsets, to_net_input
from data.processors.temporal_decoder import decode
from data.storage import clip_store, report_writer
from data.storage.checkpoint_store import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class PipelineManager:
    """Unified interface for every pipeline stage"""

    def __init__(self):
        self.phantoms = phantom_generator

    # =========================================================================
    # WORKER POOL
    # =========================================================================

    async def map_clips(self, items: Sequence[T], job: Callable[[T], R], workers: int = 1) -> List[R]:
        """Run a blocking per-clip job over items with at most `workers` in flight; results keep input order"""
        semaphore = asyncio.Semaphore(max(1, workers))

        async def run(item: T) -> R:
            async with semaphore:
                return await asyncio.to_thread(job, item)

        return list(await asyncio.gather(*(run(item) for item in items)))

    # =========================================================================
    # DATA LOADING
    # =========================================================================

    def load_dataset(
        self, settings: PipelineConfig, with_annotations: bool = True
    ) -> Tuple[List[ClipManifestEntry], Dict[str, ClipAnnotation]]:
        if settings.manifest is None:
            raise DataValidationError("A manifest is required (--manifest)")
        entries = clip_store.load_manifest(settings.manifest)
        annotations: Dict[str, ClipAnnotation] = {}
        if with_annotations:
            if settings.annotations is None:
                raise DataValidationError("An annotation file is required (--annotations)")
            annotations = clip_store.load_annotations(settings.annotations, entries)
        return entries, annotations

    def select(
        self, entries: Sequence[ClipManifestEntry], split: Optional[DatasetSplit], partition: Optional[str]
    ) -> List[ClipManifestEntry]:
        if split is None or partition is None:
            return list(entries)
        wanted = set(split.partition(partition))
        return [e for e in entries if e.clip_id in wanted]

    def prepare_clip(self, path: Path, settings: PipelineConfig) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray]]:
        """(raw frames, preprocessed crops, network inputs) of one clip"""
        raw = clip_store.read_frames(path)
        pairs = [to_net_input(frame, settings.preprocess) for frame in raw]
        return raw, [p for p, _ in pairs], [n for _, n in pairs]

    # =========================================================================
    # INGEST / SPLIT
    # =========================================================================

    async def ingest(self, settings: PipelineConfig) -> pd.DataFrame:
        """Validate manifest + annotations and describe the dataset per consistency"""
        entries, annotations = self.load_dataset(settings, with_annotations=settings.annotations is not None)
        rows = []
        for consistency in Consistency:
            bucket = [e for e in entries if e.consistency == consistency]
            frames = sum(e.n_frames for e in bucket)
            p_frames = sum(
                annotations[e.clip_id].uesc_frame - annotations[e.clip_id].bpm_frame + 1
                for e in bucket if e.clip_id in annotations
            )
            rows.append({
                "consistency": consistency.value,
                "subjects": len({e.subject_id for e in bucket}),
                "clips": len(bucket),
                "frames": frames,
                "p_share": (p_frames / frames) if frames and annotations else None
            })
        total_frames = sum(e.n_frames for e in entries)
        total_p = sum(a.uesc_frame - a.bpm_frame + 1 for a in annotations.values())
        rows.append({
            "consistency": OVERALL, "subjects": len({e.subject_id for e in entries}), "clips": len(entries),
            "frames": total_frames, "p_share": (total_p / total_frames) if total_frames and annotations else None
        })
        table = pd.DataFrame(rows)
        if settings.output_dir is not None:
            clip_store.write_table(rows, list(table.columns), Path(settings.output_dir) / "dataset.csv")
        logger.info(f"✅ Ingested {len(entries)} clips, {len(annotations)} annotations")
        return table

    async def split(self, settings: PipelineConfig, ratios: Tuple[float, float, float], out: Path) -> pd.DataFrame:
        entries = clip_store.load_manifest(settings.manifest, check_frames=False)
        split = subject_split(entries, ratios, settings.seed)
        clip_store.write_split(split, entries, out)

        rows = []
        for name in ("train", "val", "test"):
            chosen = set(split.partition(name))
            for section in [OVERALL] + [c.value for c in Consistency]:
                bucket = [
                    e for e in entries
                    if e.clip_id in chosen and (section == OVERALL or e.consistency.value == section)
                ]
                rows.append({
                    "partition": name, "section": section,
                    "subjects": len({e.subject_id for e in bucket}),
                    "clips": len(bucket), "frames": sum(e.n_frames for e in bucket)
                })
        return pd.DataFrame(rows)

    # =========================================================================
    # TRAIN / PREDICT / DECODE
    # =========================================================================

    def _labelled_frames(
        self, entry: ClipManifestEntry, annotation: ClipAnnotation, settings: PipelineConfig
    ) -> Tuple[np.ndarray, np.ndarray]:
        _, _, nets = self.prepare_clip(entry.path, settings)
        labels = label_frames(annotation, len(nets)).is_p().astype(np.int64)
        return np.stack(nets), labels

    async def _stack(
        self, entries: Sequence[ClipManifestEntry], annotations: Dict[str, ClipAnnotation], settings: PipelineConfig
    ) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        missing = [e.clip_id for e in entries if e.clip_id not in annotations]
        if missing:
            raise DataValidationError(f"No annotation for clips {missing[:5]}")
        if not entries:
            return None, None
        parts = await self.map_clips(
            list(entries), lambda e: self._labelled_frames(e, annotations[e.clip_id], settings), settings.workers
        )
        return np.concatenate([f for f, _ in parts]), np.concatenate([l for _, l in parts])

    async def train_model(
        self, settings: PipelineConfig, arch: str, split: Optional[DatasetSplit], out: Path
    ) -> ModelCheckpoint:
        entries, annotations = self.load_dataset(settings)
        train_entries = self.select(entries, split, "train")
        val_entries = self.select(entries, split, "val") if split is not None else []
        logger.info(f"🚀 Training {arch} on {len(train_entries)} clips ({len(val_entries)} validation)")

        train_x, train_y = await self._stack(train_entries, annotations, settings)
        val_x, val_y = await self._stack(val_entries, annotations, settings)
        if train_x is None:
            raise DataValidationError("No training clips selected")

        model = build_classifier(arch, settings.preprocess.net_size, settings.train.seed)
        checkpoint = await asyncio.to_thread(train, model, train_x, train_y, val_x, val_y, settings.train, arch)
        save_checkpoint(checkpoint, out)
        return checkpoint

    def _predict_one(self, model, path: Path, settings: PipelineConfig, out: Path) -> Path:
        _, _, nets = self.prepare_clip(path, settings)
        sequence, probs = predict_clip(model, nets)
        return clip_store.write_probs(sequence, probs, out)

    async def predict(
        self, settings: PipelineConfig, targets: Sequence[Tuple[Path, Path]]
    ) -> List[Path]:
        """targets: (clip path, probs.csv path) pairs"""
        model = self.load_model(settings)
        return await self.map_clips(
            list(targets), lambda t: self._predict_one(model, t[0], settings, t[1]), settings.workers
        )

    def load_model(self, settings: PipelineConfig):
        if settings.checkpoint is None:
            raise DataValidationError("A checkpoint is required (--ckpt)")
        checkpoint = load_checkpoint(settings.checkpoint)
        if checkpoint.spec.input_side != settings.preprocess.net_size:
            logger.info(
                f"Checkpoint expects {checkpoint.spec.input_side}px inputs; overriding net_size "
                f"{settings.preprocess.net_size}"
            )
            settings.preprocess.net_size = checkpoint.spec.input_side
        return model_from_checkpoint(checkpoint)

    async def decode_probs(self, probs_files: Sequence[Path], out: Path) -> Dict[str, PhaseDetection]:
        events = {}
        for path in sorted(probs_files):
            sequence, _ = clip_store.read_probs(path)
            events[clip_store.probs_clip_id(path)] = decode(sequence)
        clip_store.write_events(events, out)
        return events

    # =========================================================================
    # CAM / LOCALIZE
    # =========================================================================

    def _cam_one(self, model, path: Path, settings: PipelineConfig, out_dir: Path) -> Path:
        _, _, nets = self.prepare_clip(path, settings)
        cam = GradCAM(model)
        rows = []
        for t, net in enumerate(nets):
            activation = upsample_map(cam(net, frame_id=t), settings.preprocess.crop_size)
            clip_store.write_png(np.round(activation.values * 255).astype(np.uint8), Path(out_dir) / f"{t:06d}.png")
            rows.append({"frame": t, "target_class": activation.target_class.value,
                         "max_raw_value": activation.max_raw_value})
        return clip_store.write_cam_sidecar(rows, Path(out_dir) / "cam.csv")

    async def cam(self, settings: PipelineConfig, targets: Sequence[Tuple[Path, Path]]) -> List[Path]:
        model = self.load_model(settings)
        return await self.map_clips(
            list(targets), lambda t: self._cam_one(model, t[0], settings, t[1]), settings.workers
        )

    def localize_clip(self, model, path: Path, settings: PipelineConfig, out_dir: Path) -> Dict[int, Optional[BolusEstimate]]:
        """Localize the bolus in every frame classified P; estimates are in raw-frame coordinates"""
        raw, procs, nets = self.prepare_clip(path, settings)
        sequence, _ = predict_clip(model, nets)
        cam = GradCAM(model)
        out_dir = Path(out_dir)

        estimates: Dict[int, Optional[BolusEstimate]] = {}
        for t, label in enumerate(sequence.labels):
            if label != PhaseLabel.P:
                estimates[t] = None
                continue
            activation = upsample_map(cam(nets[t], PhaseLabel.P, frame_id=t), settings.preprocess.crop_size)
            estimate = localize(procs[t], activation, settings.refine, frame_id=t)
            if estimate is not None:
                estimate = self.to_raw(estimate, raw[t].shape, settings.preprocess.crop_size)
                clip_store.write_png(estimate.mask, out_dir / "masks" / f"{t:06d}.png")
                report_writer.write_overlay(
                    out_dir / "overlays" / f"{t:06d}.png", raw[t],
                    pred_mask=estimate.mask, centroid=estimate.centroid
                )
            estimates[t] = estimate
        clip_store.write_bolus(estimates, out_dir / "bolus.csv")
        found = sum(e is not None for e in estimates.values())
        logger.info(f"Localized {found}/{sum(sequence.is_p())} P frames of {path}")
        return estimates

    def to_raw(self, estimate: BolusEstimate, shape: Tuple[int, int], crop_size: int) -> BolusEstimate:
        """Shift a crop-space estimate into the raw frame it was cut from"""
        row, col = crop_offsets(shape[0], shape[1], crop_size)
        mask = np.zeros(shape, dtype=bool)
        mask[row:row + crop_size, col:col + crop_size] = estimate.mask
        x_min, y_min, x_max, y_max = estimate.bbox
        return BolusEstimate(
            mask=mask,
            centroid=(estimate.centroid[0] + col, estimate.centroid[1] + row),
            bbox=(x_min + col, y_min + row, x_max + col, y_max + row),
            frame_id=estimate.frame_id
        )

    async def localize(self, settings: PipelineConfig, targets: Sequence[Tuple[Path, Path]]) -> List[Path]:
        model = self.load_model(settings)
        await self.map_clips(
            list(targets), lambda t: self.localize_clip(model, t[0], settings, t[1]), settings.workers
        )
        return [Path(out) / "bolus.csv" for _, out in targets]

    # =========================================================================
    # EVALUATION
    # =========================================================================

    async def eval_phase(
        self, settings: PipelineConfig, entries: Sequence[ClipManifestEntry],
        annotations: Dict[str, ClipAnnotation], probs_dir: Path, backbone: str, out_dir: Path
    ) -> Tuple[str, List[ClipPhaseOutcome]]:
        outcomes = []
        for entry in entries:
            probs_path = Path(probs_dir) / f"{entry.clip_id}.csv"
            sequence, _ = clip_store.read_probs(probs_path)
            if entry.clip_id not in annotations:
                raise DataValidationError(f"No annotation for clip {entry.clip_id}")
            outcomes.append(evaluation.phase_outcome(
                entry.clip_id, entry.consistency.value, sequence, annotations[entry.clip_id]
            ))

        tol = settings.metrics.p3_tolerance
        report = evaluation.classification_report(backbone, outcomes, tol)
        rater_rows = evaluation.interrater_rows([annotations[e.clip_id] for e in entries], tol)

        out_dir = Path(out_dir)
        report_writer.write_phase_clips(outcomes, out_dir / "phase_clips.csv")
        report_writer.write_phase_report([report], out_dir / "phase_report.csv")
        report_writer.write_interrater(rater_rows, out_dir / "interrater.csv")
        text = report_writer.format_phase_table([report]) + "\n\n" + report_writer.format_interrater_table(rater_rows)
        (out_dir / "phase_report.txt").write_text(text + "\n", encoding="utf-8")
        logger.info(f"✅ Phase evaluation of {len(outcomes)} clips written to {out_dir}")
        return text, outcomes

    def _clip_localization(
        self, entry: ClipManifestEntry, annotation: Optional[ClipAnnotation], bolus_dir: Path,
        masks_dir: Path, landmarks: Dict, flip_x: bool, overlay_dir: Optional[Path]
    ) -> List[FrameLocalization]:
        gt_masks = clip_store.load_masks(masks_dir, entry.clip_id)
        if not gt_masks:
            logger.warning(f"⚠️ No ground-truth masks for clip {entry.clip_id}")
            return []
        if annotation is not None:
            gt_masks = {t: m for t, m in gt_masks.items() if annotation.bpm_frame <= t <= annotation.uesc_frame}
        predictions = clip_store.read_bolus(Path(bolus_dir) / entry.clip_id / "bolus.csv")
        spine = landmarks.get(entry.clip_id, {})

        outcomes = []
        raw = clip_store.read_frames(entry.path) if overlay_dir is not None else None
        for t, gt_mask in sorted(gt_masks.items()):
            outcome = evaluation.frame_localization(
                entry.clip_id, entry.consistency.value, t, gt_mask, spine, predictions.get(t), flip_x
            )
            if outcome is None:
                continue
            outcomes.append(outcome)
            if raw is not None and t < len(raw):
                pred_mask_path = Path(bolus_dir) / entry.clip_id / "masks" / f"{t:06d}.png"
                pred_mask = clip_store.read_png(pred_mask_path) > 127 if pred_mask_path.is_file() else None
                report_writer.write_overlay(
                    Path(overlay_dir) / entry.clip_id / f"{t:06d}.png", raw[t],
                    pred_mask=pred_mask, centroid=outcome.pred_centroid, gt_mask=gt_mask
                )
        return outcomes

    async def eval_localize(
        self, settings: PipelineConfig, entries: Sequence[ClipManifestEntry],
        annotations: Dict[str, ClipAnnotation], bolus_dir: Path, masks_dir: Path,
        backbone: str, out_dir: Path, flip_x: bool = False, overlays: bool = False
    ) -> Tuple[str, List[FrameLocalization]]:
        if settings.landmarks is None:
            raise DataValidationError("A landmark file is required (--landmarks)")
        landmarks = clip_store.load_landmarks(settings.landmarks)
        out_dir = Path(out_dir)
        overlay_dir = out_dir / "overlays" if overlays else None

        per_clip = await self.map_clips(
            list(entries),
            lambda e: self._clip_localization(
                e, annotations.get(e.clip_id), bolus_dir, masks_dir, landmarks, flip_x, overlay_dir
            ),
            settings.workers
        )
        outcomes = [o for clip in per_clip for o in clip]
        m = settings.metrics
        report = evaluation.localization_report(
            backbone, outcomes, default_thresholds(m.sweep_start, m.sweep_stop, m.sweep_step)
        )

        report_writer.write_localization_frames(outcomes, out_dir / "localization_frames.csv")
        report_writer.write_trajectories(outcomes, out_dir / "trajectories.csv")
        report_writer.write_localization_report([report], out_dir / "localization_report.csv")
        report_writer.write_f1_curve([report], out_dir / "f1_curve.csv")
        report_writer.draw_f1_curve([report], out_dir / "f1_curve.png")
        text = report_writer.format_localization_table([report])
        (out_dir / "localization_report.txt").write_text(text + "\n", encoding="utf-8")
        logger.info(f"✅ Localization evaluation of {len(outcomes)} frames written to {out_dir}")
        return text, outcomes

    # =========================================================================
    # PHANTOM / REPORT
    # =========================================================================

    async def phantom(
        self, out_dir: Path, subjects: int, clips_per_subject: int, seed: int,
        difficulty: Difficulty, workers: int = 1
    ) -> Dict[str, Path]:
        plan = self.phantoms.plan_dataset(subjects, clips_per_subject, seed, difficulty)
        logger.info(f"🚀 Generating {len(plan)} phantom clips for {subjects} subjects")
        results = await self.map_clips(
            plan, lambda p: self.phantoms.write_clip(out_dir, p[0], p[1], p[2]), workers
        )
        return self.phantoms.write_dataset_files(out_dir, results)

    async def report(self, inputs: Dict[str, Path], out_dir: Path, settings: PipelineConfig) -> str:
        """Combine per-backbone evaluation directories into comparison tables"""
        out_dir = Path(out_dir)
        tol = settings.metrics.p3_tolerance
        m = settings.metrics
        thresholds = default_thresholds(m.sweep_start, m.sweep_stop, m.sweep_step)

        phase_reports, loc_reports, frames_by_backbone = [], [], {}
        for backbone, directory in inputs.items():
            directory = Path(directory)
            if (directory / "phase_clips.csv").is_file():
                outcomes = report_writer.read_phase_clips(directory / "phase_clips.csv")
                phase_reports.append(evaluation.classification_report(backbone, outcomes, tol))
            if (directory / "localization_frames.csv").is_file():
                frames = report_writer.read_localization_frames(directory / "localization_frames.csv")
                frames_by_backbone[backbone] = frames
                loc_reports.append(evaluation.localization_report(backbone, frames, thresholds))
        if not phase_reports and not loc_reports:
            raise DataValidationError(f"No evaluation outputs found in {[str(p) for p in inputs.values()]}")

        text = []
        if phase_reports:
            report_writer.write_phase_report(phase_reports, out_dir / "phase_report.csv")
            text.append(report_writer.format_phase_table(phase_reports))
        if loc_reports:
            comparisons: Dict[str, SectionComparison] = {
                section: evaluation.compare_backbones(frames_by_backbone, section, m.alpha)
                for section in evaluation.SECTIONS
            }
            report_writer.write_localization_report(loc_reports, out_dir / "localization_report.csv")
            report_writer.write_f1_curve(loc_reports, out_dir / "f1_curve.csv")
            report_writer.draw_f1_curve(loc_reports, out_dir / "f1_curve.png")
            text.append(report_writer.format_localization_table(loc_reports, comparisons))

        joined = "\n\n".join(text)
        (out_dir / "report.txt").write_text(joined + "\n", encoding="utf-8")
        return joined


# Singleton instance
pipeline_manager = PipelineManager()
