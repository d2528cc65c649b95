from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Tuple, Literal
from pathlib import Path
from enum import Enum
import hashlib
import json

import numpy as np

# ============================================================================
# ENUMS AND CONSTANTS
# ============================================================================

CROP_SIZE = 341
DEFAULT_NET_SIZE = 224
FAST_NET_SIZE = 112
MIN_FEATURE_GRID = 4


class Consistency(str, Enum):
    """IDDSI liquid consistency levels"""
    THIN = "thin"
    SLIGHTLY_THICK = "slightly_thick"
    MILDLY_THICK = "mildly_thick"
    MODERATELY_THICK = "moderately_thick"
    EXTREMELY_THICK = "extremely_thick"


class PhaseLabel(str, Enum):
    N = "N"
    P = "P"


class Balloon(str, Enum):
    EXPAND = "expand"
    CONTRACT = "contract"
    OFF = "off"

    @property
    def force(self) -> int:
        return {"expand": 1, "contract": -1, "off": 0}[self.value]


class ClassWeighting(str, Enum):
    NONE = "none"
    BALANCED = "balanced"


# ============================================================================
# CLIP AND ANNOTATION MODELS
# ============================================================================

class ClipManifestEntry(BaseModel):
    """One bolus-level clip as listed in a manifest"""
    clip_id: str = Field(..., min_length=1)
    subject_id: str = Field(..., min_length=1)
    consistency: Consistency
    path: Path = Field(..., description="Directory of numbered frames or a single video file")
    n_frames: int = Field(..., ge=1)
    fps: float = Field(default=30.0, gt=0)


class SpineLandmarks(BaseModel):
    """Anterior-inferior corners of C2 and C4, image pixel coordinates (x, y)"""
    c2: Tuple[float, float]
    c4: Tuple[float, float]

    @model_validator(mode="after")
    def check_distinct(self):
        if self.distance <= 0:
            raise ValueError(f"C2 and C4 coincide at {self.c2}")
        return self

    @property
    def distance(self) -> float:
        return float(np.hypot(self.c2[0] - self.c4[0], self.c2[1] - self.c4[1]))


class ClipAnnotation(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    clip_id: str
    bpm_frame: int = Field(..., ge=0)
    uesc_frame: int = Field(..., ge=0)

    # Pre-consensus ratings, when the annotation file carries them
    rater_a_bpm: Optional[int] = None
    rater_a_uesc: Optional[int] = None
    rater_b_bpm: Optional[int] = None
    rater_b_uesc: Optional[int] = None

    # Evaluation-only ground truth
    bolus_masks: Dict[int, np.ndarray] = Field(default_factory=dict)
    spine: Dict[int, SpineLandmarks] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_order(self):
        if self.bpm_frame > self.uesc_frame:
            raise ValueError(
                f"Clip {self.clip_id}: BPM frame {self.bpm_frame} is after UESC frame {self.uesc_frame}"
            )
        return self

    @property
    def has_raters(self) -> bool:
        return None not in (self.rater_a_bpm, self.rater_a_uesc, self.rater_b_bpm, self.rater_b_uesc)

    def check_frame_count(self, n_frames: int) -> None:
        if self.uesc_frame >= n_frames:
            raise ValueError(
                f"Clip {self.clip_id}: UESC frame {self.uesc_frame} out of range for {n_frames} frames"
            )


class DatasetSplit(BaseModel):
    """Subject-wise train/validation/test partition of clip ids"""
    train_clips: List[str]
    val_clips: List[str]
    test_clips: List[str]
    seed: int
    subjects: Dict[str, str] = Field(
        default_factory=dict,
        description="subject_id -> partition name"
    )

    @model_validator(mode="after")
    def check_disjoint(self):
        train, val, test = set(self.train_clips), set(self.val_clips), set(self.test_clips)
        if train & val or train & test or val & test:
            raise ValueError("Split partitions overlap")
        return self

    def partition(self, name: str) -> List[str]:
        return {"train": self.train_clips, "val": self.val_clips, "test": self.test_clips}[name]


# ============================================================================
# PHASE MODELS
# ============================================================================

class PhaseSequence(BaseModel):
    labels: List[PhaseLabel] = Field(..., min_length=1)

    @classmethod
    def from_string(cls, text: str) -> "PhaseSequence":
        return cls(labels=[PhaseLabel(ch) for ch in text])

    @classmethod
    def from_mask(cls, is_p: np.ndarray) -> "PhaseSequence":
        return cls(labels=[PhaseLabel.P if flag else PhaseLabel.N for flag in np.asarray(is_p, dtype=bool)])

    def to_string(self) -> str:
        return "".join(label.value for label in self.labels)

    def is_p(self) -> np.ndarray:
        return np.array([label == PhaseLabel.P for label in self.labels], dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)


class PhaseDetection(BaseModel):
    bpm: Optional[int] = None
    uesc: Optional[int] = None

    @model_validator(mode="after")
    def check_order(self):
        if self.bpm is not None and self.uesc is not None and self.bpm > self.uesc:
            raise ValueError(f"BPM {self.bpm} after UESC {self.uesc}")
        return self


# ============================================================================
# PREPROCESSING AND CLASSIFIER MODELS
# ============================================================================

class PreprocessConfig(BaseModel):
    crop_size: int = Field(default=CROP_SIZE, ge=1)
    clahe_clip: float = Field(default=2.0, gt=0)
    clahe_tiles: Tuple[int, int] = (8, 8)
    net_size: int = Field(default=DEFAULT_NET_SIZE, ge=32)

    @field_validator("clahe_tiles")
    @classmethod
    def check_tiles(cls, v):
        if v[0] <= 0 or v[1] <= 0:
            raise ValueError(f"CLAHE tile grid must be positive, got {v}")
        return v


class CnnSpec(BaseModel):
    """Small VGG-style frame classifier: n blocks of two 3x3 convs + 2x2 max pooling"""
    n_blocks: Literal[3, 4] = 3
    filters_per_block: List[int] = Field(default_factory=lambda: [4, 8, 16])
    conv_kernel: int = 3
    convs_per_block: int = 2
    pool: int = 2
    fc_sizes: List[int] = Field(default_factory=lambda: [128, 64])
    n_classes: Literal[2] = 2
    input_side: int = Field(default=DEFAULT_NET_SIZE, ge=32)

    @model_validator(mode="after")
    def check_shapes(self):
        if len(self.filters_per_block) != self.n_blocks:
            raise ValueError(
                f"{len(self.filters_per_block)} filter counts given for {self.n_blocks} blocks"
            )
        if any(f <= 0 for f in self.filters_per_block) or any(f <= 0 for f in self.fc_sizes):
            raise ValueError("Filter and fully connected sizes must be positive")
        if self.feature_grid < MIN_FEATURE_GRID:
            raise ValueError(
                f"Input side {self.input_side} leaves a {self.feature_grid}x{self.feature_grid} "
                f"feature grid after {self.n_blocks} poolings (minimum {MIN_FEATURE_GRID})"
            )
        return self

    @property
    def feature_grid(self) -> int:
        side = self.input_side
        for _ in range(self.n_blocks):
            side //= self.pool
        return side

    @classmethod
    def cnn3(cls, input_side: int = DEFAULT_NET_SIZE) -> "CnnSpec":
        return cls(n_blocks=3, filters_per_block=[4, 8, 16], input_side=input_side)

    @classmethod
    def cnn4(cls, input_side: int = DEFAULT_NET_SIZE) -> "CnnSpec":
        return cls(n_blocks=4, filters_per_block=[4, 8, 16, 32], input_side=input_side)


class TrainConfig(BaseModel):
    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=8, ge=1)
    initial_lr: float = Field(default=1e-3, gt=0)
    lr_decay_period: int = Field(default=5, ge=1)
    lr_decay_factor: float = Field(default=0.9, gt=0, le=1)
    class_weighting: ClassWeighting = ClassWeighting.NONE
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        """Step schedule: initial_lr * factor ** floor(epoch / period)"""
        return self.initial_lr * self.lr_decay_factor ** (epoch // self.lr_decay_period)

    def config_hash(self, spec: CnnSpec) -> str:
        payload = json.dumps(
            {"spec": spec.model_dump(mode="json"), "train": self.model_dump(mode="json")},
            sort_keys=True
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class FramePrediction(BaseModel):
    prob_n: float = Field(..., ge=0, le=1)
    prob_p: float = Field(..., ge=0, le=1)
    predicted: PhaseLabel

    @model_validator(mode="after")
    def check_distribution(self):
        if abs(self.prob_n + self.prob_p - 1.0) > 1e-6:
            raise ValueError(f"Probabilities sum to {self.prob_n + self.prob_p}")
        expected = PhaseLabel.P if self.prob_p > self.prob_n else PhaseLabel.N
        if self.predicted != expected:
            raise ValueError("Predicted label is not the argmax")
        return self


class EpochRecord(BaseModel):
    epoch: int
    lr: float
    loss: float
    accuracy: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None


class ModelCheckpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    arch: str
    spec: CnnSpec
    train_config: TrainConfig
    history: List[EpochRecord] = Field(default_factory=list)
    seed: int
    config_hash: str
    tensors: Dict[str, np.ndarray] = Field(default_factory=dict, description="Parameter name -> array")


# ============================================================================
# LOCALIZATION MODELS
# ============================================================================

class ActivationMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    source_grid: Tuple[int, int]
    frame_id: int = 0
    target_class: PhaseLabel = PhaseLabel.P
    max_raw_value: float = 0.0

    @field_validator("values")
    @classmethod
    def check_range(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"Activation map must be 2-D, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("Activation map values must lie in [0, 1]")
        return v


class RefineConfig(BaseModel):
    threshold_frac: float = Field(default=0.5, gt=0, lt=1)
    k_darkest: int = Field(default=100, ge=1)
    gac_iterations: int = Field(default=100, ge=0)
    dilation_radius: int = Field(default=2, ge=0)
    gac_smooth_sigma: float = Field(default=2.0, gt=0)
    gac_edge_scale: float = Field(default=100.0, gt=0)
    gac_edge_exponent: float = Field(default=2.0, gt=0)
    gac_balloon_threshold: float = Field(
        default=0.9, gt=0,
        description="Balloon force acts only where the edge-stopping function exceeds this"
    )
    gac_smoothing: int = Field(default=1, ge=0)
    balloon: Balloon = Balloon.EXPAND


class BolusEstimate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mask: np.ndarray
    centroid: Tuple[float, float] = Field(..., description="(x, y) in pixels")
    bbox: Tuple[int, int, int, int] = Field(..., description="(x_min, y_min, x_max, y_max), inclusive")
    frame_id: int = 0


class SpineTransform(BaseModel):
    origin: Tuple[float, float]
    unit_x: Tuple[float, float]
    unit_y: Tuple[float, float]
    d: float = Field(..., gt=0)


# ============================================================================
# PHANTOM MODELS
# ============================================================================

class Difficulty(str, Enum):
    STANDARD = "standard"
    HARD = "hard"


class PhantomConfig(BaseModel):
    """Synthetic lateral swallow clip. Coordinates are (x, y) pixels in the raw frame."""
    n_frames: int = Field(default=60, ge=2)
    height: int = Field(default=480, ge=CROP_SIZE)
    width: int = Field(default=720, ge=CROP_SIZE)
    fps: float = Field(default=30.0, gt=0)

    # Bolus
    semi_axes: Tuple[float, float] = (14.0, 11.0)
    bolus_contrast: float = Field(default=0.2, gt=0, lt=1, description="Bolus intensity as a fraction of background")
    oral_start: Tuple[float, float] = (290.0, 105.0)
    esophagus_end: Tuple[float, float] = (372.0, 400.0)
    entry_frame: int = 20
    exit_frame: int = 40
    consistency: Consistency = Consistency.THIN
    elongation: float = Field(default=1.0, ge=1.0)

    # Pharynx region the bolus crosses between BPM and UESC, (x_min, y_min, x_max, y_max)
    pharynx_roi: Tuple[int, int, int, int] = (330, 160, 410, 340)

    # Background and anatomy
    background_level: float = Field(default=0.7, gt=0, le=1)
    texture_amplitude: float = Field(default=0.08, ge=0)
    noise_sigma: float = Field(default=0.02, ge=0)
    distractors: int = Field(default=0, ge=0)
    c2: Tuple[float, float] = (440.0, 170.0)
    c4: Tuple[float, float] = (445.0, 300.0)
    seed: int = 0
    subject_seed: int = 0

    @model_validator(mode="after")
    def check_window(self):
        if not 0 < self.entry_frame < self.exit_frame < self.n_frames - 1:
            raise ValueError(
                f"Need 0 < entry ({self.entry_frame}) < exit ({self.exit_frame}) < n_frames - 1 ({self.n_frames - 1})"
            )
        return self


class PhantomClip(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: List[np.ndarray]
    truth: ClipAnnotation
    centroids: Dict[int, Tuple[float, float]] = Field(default_factory=dict, description="Analytic path, all frames")
    config: PhantomConfig


# ============================================================================
# METRIC AND PIPELINE MODELS
# ============================================================================

class MetricConfig(BaseModel):
    p3_tolerance: int = Field(default=3, ge=0)
    sweep_start: float = Field(default=0.25, gt=0, lt=1)
    sweep_stop: float = Field(default=0.75, gt=0, lt=1)
    sweep_step: float = Field(default=0.05, gt=0)
    alpha: float = Field(default=0.05, gt=0, lt=1)


class PipelineConfig(BaseModel):
    # Paths
    manifest: Optional[Path] = None
    annotations: Optional[Path] = None
    landmarks: Optional[Path] = None
    checkpoint: Optional[Path] = None
    output_dir: Optional[Path] = None

    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    refine: RefineConfig = Field(default_factory=RefineConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    seed: int = 0
    workers: int = Field(default=1, ge=1)
