"""
Synthetic lateral VFSS clips with analytically known swallow timing.

A dark elliptical bolus travels from the oral cavity through a fixed pharynx
region (in front of a rendered C2-C5 column) into the esophagus. The frames in
which the rendered bolus overlaps the pharynx region are exactly the BPM..UESC
window, so phase labels, bolus masks, centroids and spine landmarks are all
known without annotation.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage as ndi

from data.models.errors import DataValidationError
from data.models.schemas import (
    ClipAnnotation, ClipManifestEntry, Consistency, Difficulty,
    PhantomClip, PhantomConfig, SpineLandmarks
)
from data.storage import clip_store

logger = logging.getLogger(__name__)


class PhantomGenerator:
    """Generate phantom swallow clips and complete on-disk datasets"""

    def __init__(self):
        # Consistency proxies: thicker boluses move slower (longer phase) and stretch less
        self.consistency_profiles = {
            Consistency.THIN: {"speed": 1.4, "elongation": 1.6},
            Consistency.SLIGHTLY_THICK: {"speed": 1.2, "elongation": 1.4},
            Consistency.MILDLY_THICK: {"speed": 1.0, "elongation": 1.25},
            Consistency.MODERATELY_THICK: {"speed": 0.85, "elongation": 1.1},
            Consistency.EXTREMELY_THICK: {"speed": 0.7, "elongation": 1.0},
        }

        self.difficulty_presets = {
            Difficulty.STANDARD: {"noise_sigma": 0.02, "bolus_contrast": 0.2, "distractors": 0},
            Difficulty.HARD: {"noise_sigma": 0.05, "bolus_contrast": 0.4, "distractors": 2},
        }

        self.base_phase_frames = 18
        self.oral_frames = (12, 24)
        self.post_frames = (10, 18)
        self.landmark_jitter_px = 6.0
        self.vertebra_density = 0.82

    # =========================================================================
    # CLIP GENERATION
    # =========================================================================

    def bolus_path(self, config: PhantomConfig) -> Tuple[np.ndarray, np.ndarray]:
        """Per-frame bolus centers (x, y) and semi-axes (a, b)"""
        a, b = config.semi_axes
        b_phase = b * config.elongation
        a_phase = a / np.sqrt(config.elongation)
        x0, y0, x1, y1 = config.pharynx_roi
        x_mid = (x0 + x1) / 2.0

        pre_end = np.array([x_mid - 12.0, y0 - b - 2.0])
        phase_start = np.array([x_mid - 10.0, y0 - b_phase + 2.0])
        phase_end = np.array([x_mid + 5.0, y1 + b_phase - 2.0])
        post_start = np.array([x_mid + 5.0, y1 + b + 2.0])
        post_end = np.array(config.esophagus_end, dtype=np.float64)
        post_end[1] = max(post_end[1], post_start[1])
        oral = np.array(config.oral_start, dtype=np.float64)

        def lerp(p, q, t):
            return p + (q - p) * t

        centers, axes = [], []
        entry, exit_, n = config.entry_frame, config.exit_frame, config.n_frames
        for t in range(n):
            if t < entry:
                centers.append(lerp(oral, pre_end, t / max(1, entry - 1)))
                axes.append((a, b))
            elif t <= exit_:
                centers.append(lerp(phase_start, phase_end, (t - entry) / (exit_ - entry)))
                axes.append((a_phase, b_phase))
            else:
                centers.append(lerp(post_start, post_end, (t - exit_ - 1) / max(1, n - exit_ - 2)))
                axes.append((a, b))
        return np.array(centers), np.array(axes)

    def background(self, config: PhantomConfig) -> np.ndarray:
        """Static subject anatomy: smooth tissue texture plus the cervical column"""
        rng = np.random.default_rng([config.subject_seed, 7])
        texture = ndi.gaussian_filter(rng.standard_normal((config.height, config.width)), sigma=12)
        texture /= texture.std() or 1.0
        image = config.background_level + config.texture_amplitude * texture

        # C2..C5 bodies; anterior-inferior corners of C2 and C4 sit on the landmarks
        (c2x, c2y), (c4x, c4y) = config.c2, config.c4
        spacing = (c4y - c2y) / 2.0
        for level in range(4):
            bottom = c2y + level * spacing
            top = bottom - 0.8 * spacing
            anterior = c2x + level * (c4x - c2x) / 2.0
            rows = slice(max(0, int(round(top))), min(config.height, int(round(bottom)) + 1))
            cols = slice(max(0, int(round(anterior))), min(config.width, int(round(anterior + 45)) + 1))
            image[rows, cols] *= self.vertebra_density
        return image

    def render_ellipse(self, shape: Tuple[int, int], center: np.ndarray, axes: np.ndarray) -> np.ndarray:
        yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
        return ((xx - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2 <= 1.0

    def _check_bounds(self, config: PhantomConfig, centers: np.ndarray, axes: np.ndarray) -> None:
        low = centers - axes
        high = centers + axes
        if (low < 0).any() or (high[:, 0] > config.width - 1).any() or (high[:, 1] > config.height - 1).any():
            raise DataValidationError("Bolus path exits the frame bounds")

    def _roi_overlap(self, mask: np.ndarray, roi: Tuple[int, int, int, int]) -> bool:
        x0, y0, x1, y1 = roi
        return bool(mask[y0:y1 + 1, x0:x1 + 1].any())

    def generate_clip(self, config: PhantomConfig, clip_id: str = "phantom") -> PhantomClip:
        """Render one clip; identical config and seeds give bit-identical frames"""
        centers, axes = self.bolus_path(config)
        self._check_bounds(config, centers, axes)
        shape = (config.height, config.width)

        rng = np.random.default_rng([config.seed, config.subject_seed])
        base = self.background(config)
        for _ in range(config.distractors):
            center = np.array([rng.uniform(0.3, 0.7) * config.width, rng.uniform(0.2, 0.45) * config.height])
            radius = rng.uniform(6.0, 10.0)
            blob = self.render_ellipse(shape, center, np.array([radius, radius]))
            if self._roi_overlap(blob, config.pharynx_roi):
                continue
            base = np.where(blob, base * 0.5, base)

        frames: List[np.ndarray] = []
        masks: Dict[int, np.ndarray] = {}
        for t in range(config.n_frames):
            mask = self.render_ellipse(shape, centers[t], axes[t])
            in_roi = self._roi_overlap(mask, config.pharynx_roi)
            if in_roi != (config.entry_frame <= t <= config.exit_frame):
                raise DataValidationError(
                    f"Frame {t}: bolus/pharynx overlap ({in_roi}) disagrees with the "
                    f"[{config.entry_frame}, {config.exit_frame}] window; adjust the path or ROI"
                )
            if in_roi:
                masks[t] = mask
            intensity = np.where(mask, base * config.bolus_contrast, base)
            if config.noise_sigma > 0:
                intensity = intensity + rng.normal(0.0, config.noise_sigma, size=shape)
            frames.append(np.round(np.clip(intensity, 0.0, 1.0) * 255.0).astype(np.uint8))

        spine = SpineLandmarks(c2=config.c2, c4=config.c4)
        truth = ClipAnnotation(
            clip_id=clip_id,
            bpm_frame=config.entry_frame,
            uesc_frame=config.exit_frame,
            bolus_masks=masks,
            spine={t: spine for t in masks}
        )
        return PhantomClip(
            frames=frames,
            truth=truth,
            centroids={t: (float(centers[t][0]), float(centers[t][1])) for t in range(config.n_frames)},
            config=config
        )

    # =========================================================================
    # DATASET GENERATION
    # =========================================================================

    def clip_config(
        self,
        template: PhantomConfig,
        consistency: Consistency,
        difficulty: Difficulty,
        seed: int,
        subject_index: int,
        clip_index: int
    ) -> PhantomConfig:
        """Timing, anatomy jitter and noise for one clip, drawn from its own PRNG stream"""
        rng = np.random.default_rng([seed, subject_index, clip_index])
        subject_rng = np.random.default_rng([seed, subject_index])
        profile = self.consistency_profiles[consistency]

        oral = int(rng.integers(self.oral_frames[0], self.oral_frames[1] + 1))
        phase = max(4, int(round(self.base_phase_frames / profile["speed"])) + int(rng.integers(-2, 3)))
        post = int(rng.integers(self.post_frames[0], self.post_frames[1] + 1))
        jitter = subject_rng.uniform(-self.landmark_jitter_px, self.landmark_jitter_px, size=2)

        return template.model_copy(update={
            "n_frames": oral + phase + post,
            "entry_frame": oral,
            "exit_frame": oral + phase - 1,
            "consistency": consistency,
            "elongation": profile["elongation"],
            "c2": (template.c2[0] + jitter[0], template.c2[1] + jitter[1]),
            "c4": (template.c4[0] + jitter[0], template.c4[1] + jitter[1]),
            "background_level": float(np.clip(template.background_level + subject_rng.uniform(-0.05, 0.05), 0.3, 1.0)),
            "seed": int(rng.integers(0, 2 ** 31 - 1)),
            "subject_seed": int(subject_rng.integers(0, 2 ** 31 - 1)),
            **self.difficulty_presets[difficulty]
        })

    def plan_dataset(
        self,
        n_subjects: int,
        clips_per_subject: int,
        seed: int = 0,
        difficulty: Difficulty = Difficulty.STANDARD,
        template: Optional[PhantomConfig] = None
    ) -> List[Tuple[str, str, PhantomConfig]]:
        """(clip_id, subject_id, config) for every clip; consistencies cycle so all five appear"""
        if n_subjects < 1 or clips_per_subject < 1:
            raise DataValidationError("Subject and clip counts must be positive")
        template = template or PhantomConfig()
        levels = list(Consistency)
        plan = []
        for s in range(n_subjects):
            subject_id = f"S{s + 1:03d}"
            for c in range(clips_per_subject):
                consistency = levels[(s + c) % len(levels)]
                config = self.clip_config(template, consistency, difficulty, seed, s, c)
                plan.append((f"{subject_id}_C{c + 1:02d}", subject_id, config))
        return plan

    def rater_annotation(self, truth: ClipAnnotation, n_frames: int, seed: int) -> ClipAnnotation:
        """Add simulated pre-consensus ratings around the consensus frames"""
        rng = np.random.default_rng([seed, 99])

        def jitter(frame: int, spread: int) -> int:
            return int(np.clip(frame + rng.integers(-spread, spread + 1), 0, n_frames - 1))

        a_bpm, b_bpm = jitter(truth.bpm_frame, 2), jitter(truth.bpm_frame, 4)
        a_uesc, b_uesc = jitter(truth.uesc_frame, 2), jitter(truth.uesc_frame, 4)
        return truth.model_copy(update={
            "rater_a_bpm": a_bpm, "rater_a_uesc": max(a_bpm, a_uesc),
            "rater_b_bpm": b_bpm, "rater_b_uesc": max(b_bpm, b_uesc),
        })

    def write_clip(
        self, out_dir: Path, clip_id: str, subject_id: str, config: PhantomConfig
    ) -> Tuple[ClipManifestEntry, ClipAnnotation]:
        """Render one planned clip to <out_dir>/frames/<clip_id>/ and its masks to <out_dir>/masks/<clip_id>/"""
        out_dir = Path(out_dir)
        clip = self.generate_clip(config, clip_id)
        frame_dir = out_dir / "frames" / clip_id
        for t, frame in enumerate(clip.frames):
            clip_store.write_png(frame, frame_dir / f"{t:06d}.png")
        for t, mask in clip.truth.bolus_masks.items():
            clip_store.write_png(mask, out_dir / "masks" / clip_id / f"{t:06d}.png")

        entry = ClipManifestEntry(
            clip_id=clip_id,
            subject_id=subject_id,
            consistency=config.consistency,
            path=frame_dir,
            n_frames=config.n_frames,
            fps=config.fps
        )
        annotation = self.rater_annotation(clip.truth, config.n_frames, config.seed)
        return entry, annotation

    def write_dataset_files(
        self, out_dir: Path, results: List[Tuple[ClipManifestEntry, ClipAnnotation]]
    ) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        entries = [entry for entry, _ in results]
        annotations = [annotation for _, annotation in results]
        landmarks = {a.clip_id: dict(a.spine) for a in annotations}
        paths = {
            "manifest": clip_store.write_manifest(entries, out_dir / "manifest.csv"),
            "annotations": clip_store.write_annotations(annotations, out_dir / "annotations.csv"),
            "landmarks": clip_store.write_landmarks(landmarks, out_dir / "landmarks.csv"),
            "masks": out_dir / "masks",
        }
        logger.info(f"✅ Phantom dataset with {len(entries)} clips written to {out_dir}")
        return paths

    def generate_dataset(
        self,
        out_dir: Path,
        n_subjects: int,
        clips_per_subject: int,
        seed: int = 0,
        difficulty: Difficulty = Difficulty.STANDARD,
        template: Optional[PhantomConfig] = None
    ) -> Dict[str, Path]:
        """Write frames, masks, manifest, annotations and landmarks in the clip_store layout"""
        plan = self.plan_dataset(n_subjects, clips_per_subject, seed, difficulty, template)
        logger.info(f"🚀 Generating {len(plan)} phantom clips for {n_subjects} subjects")
        results = [self.write_clip(out_dir, clip_id, subject_id, config) for clip_id, subject_id, config in plan]
        return self.write_dataset_files(out_dir, results)


# Singleton instance
phantom_generator = PhantomGenerator()
