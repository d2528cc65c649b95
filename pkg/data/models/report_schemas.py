# Evaluation report and statistics models
from pydantic import BaseModel, Field, model_validator
from typing import Optional, List, Dict, Tuple

# ============================================================================
# PHASE DETECTION REPORTS
# ============================================================================

OVERALL = "overall"


class PhaseScores(BaseModel):
    """One row of the phase detection table (F1 / P3_BPM / P3_UESC)"""
    n: int = Field(..., ge=0, description="Clips in this bucket")
    f1: Optional[float] = Field(None, ge=0, le=1)
    p3_bpm: Optional[float] = Field(None, ge=0, le=100)
    p3_uesc: Optional[float] = Field(None, ge=0, le=100)


class ClassificationReport(BaseModel):
    backbone: str
    overall: PhaseScores
    per_consistency: Dict[str, PhaseScores] = Field(default_factory=dict)

    @property
    def f1(self) -> Optional[float]:
        return self.overall.f1

    @property
    def p3_bpm(self) -> Optional[float]:
        return self.overall.p3_bpm

    @property
    def p3_uesc(self) -> Optional[float]:
        return self.overall.p3_uesc


class InterraterRow(BaseModel):
    event: str
    n: int
    r: Optional[float] = None
    p3: Optional[float] = None


# ============================================================================
# LOCALIZATION REPORTS
# ============================================================================

class LocalizationScores(BaseModel):
    """One row of the localization table (r_y / RMSE median (IQR))"""
    n: int = Field(..., ge=0, description="Evaluated frames")
    n_detected: int = Field(default=0, ge=0)
    r_y: Optional[float] = Field(None, ge=-1, le=1)
    rmse_median: Optional[float] = Field(None, ge=0)
    rmse_q1: Optional[float] = Field(None, ge=0)
    rmse_q3: Optional[float] = Field(None, ge=0)
    f1_curve: Dict[float, float] = Field(default_factory=dict)


class LocalizationReport(BaseModel):
    backbone: str
    overall: LocalizationScores
    per_consistency: Dict[str, LocalizationScores] = Field(default_factory=dict)


# ============================================================================
# STATISTICS
# ============================================================================

class FriedmanResult(BaseModel):
    chi2: float = Field(..., ge=0)
    df: int = Field(..., ge=1)
    p_value: float = Field(..., ge=0, le=1)
    n_blocks: int = Field(..., ge=2)
    treatments: List[str]
    mean_ranks: Dict[str, float]

    @model_validator(mode="after")
    def check_df(self):
        if self.df != len(self.treatments) - 1:
            raise ValueError(f"df {self.df} does not match {len(self.treatments)} treatments")
        return self


class PostHocResult(BaseModel):
    method: str = "Nemenyi mean-rank comparison (rank-based analogue of Tukey HSD)"
    alpha: float
    critical_difference: float
    treatments: List[str]
    significant: List[List[bool]]
    best: Optional[str] = None

    def is_significant(self, a: str, b: str) -> bool:
        return self.significant[self.treatments.index(a)][self.treatments.index(b)]


class SectionComparison(BaseModel):
    """Friedman + post-hoc over backbones for one report section"""
    section: str
    friedman: Optional[FriedmanResult] = None
    posthoc: Optional[PostHocResult] = None
    note: Optional[str] = None


# ============================================================================
# PER-CLIP / PER-FRAME OUTCOMES
# ============================================================================

class ClipPhaseOutcome(BaseModel):
    """Predicted vs annotated phase for one clip, the unit phase reports aggregate"""
    clip_id: str
    consistency: str
    predicted: str = Field(..., min_length=1, description="P/N string, one character per frame")
    truth: str = Field(..., min_length=1)
    pred_bpm: Optional[int] = None
    pred_uesc: Optional[int] = None
    gt_bpm: int
    gt_uesc: int

    @model_validator(mode="after")
    def check_lengths(self):
        if len(self.predicted) != len(self.truth):
            raise ValueError(
                f"Clip {self.clip_id}: {len(self.predicted)} predicted labels for {len(self.truth)} frames"
            )
        return self


class FrameLocalization(BaseModel):
    """Localization outcome for one annotated frame, raw-frame pixel coordinates"""
    clip_id: str
    consistency: str
    frame: int = Field(..., ge=0)
    detected: bool
    gt_centroid: Tuple[float, float]
    gt_bbox: Tuple[int, int, int, int]
    pred_centroid: Optional[Tuple[float, float]] = None
    pred_bbox: Optional[Tuple[int, int, int, int]] = None
    gt_spine: Tuple[float, float]
    pred_spine: Optional[Tuple[float, float]] = None
    d: float = Field(..., gt=0, description="C2-C4 distance in pixels")
    error: Optional[float] = Field(None, ge=0, description="Centroid error normalized by d")
    landmarks_reused: bool = False
