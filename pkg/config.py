import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from data.models.errors import DataValidationError
from data.models.schemas import FAST_NET_SIZE, PipelineConfig

# Load environment variables
load_dotenv()

ENV_PREFIX = "VFSS_"

# Flat key -> (section, field) of PipelineConfig; section None means top level
FIELD_MAP = {
    "manifest": (None, "manifest"),
    "annotations": (None, "annotations"),
    "landmarks": (None, "landmarks"),
    "checkpoint": (None, "checkpoint"),
    "output_dir": (None, "output_dir"),
    "seed": (None, "seed"),
    "workers": (None, "workers"),
    "crop_size": ("preprocess", "crop_size"),
    "clahe_clip": ("preprocess", "clahe_clip"),
    "clahe_tiles": ("preprocess", "clahe_tiles"),
    "net_size": ("preprocess", "net_size"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "initial_lr": ("train", "initial_lr"),
    "lr_decay_period": ("train", "lr_decay_period"),
    "lr_decay_factor": ("train", "lr_decay_factor"),
    "class_weighting": ("train", "class_weighting"),
    "threshold_frac": ("refine", "threshold_frac"),
    "k_darkest": ("refine", "k_darkest"),
    "gac_iterations": ("refine", "gac_iterations"),
    "dilation_radius": ("refine", "dilation_radius"),
    "gac_smooth_sigma": ("refine", "gac_smooth_sigma"),
    "gac_edge_scale": ("refine", "gac_edge_scale"),
    "gac_edge_exponent": ("refine", "gac_edge_exponent"),
    "gac_balloon_threshold": ("refine", "gac_balloon_threshold"),
    "gac_smoothing": ("refine", "gac_smoothing"),
    "balloon": ("refine", "balloon"),
    "p3_tolerance": ("metrics", "p3_tolerance"),
    "sweep_start": ("metrics", "sweep_start"),
    "sweep_stop": ("metrics", "sweep_stop"),
    "sweep_step": ("metrics", "sweep_step"),
    "alpha": ("metrics", "alpha"),
}


class Config:
    """Application configuration settings"""

    # Application Configuration
    LOG_LEVEL: str = os.getenv("VFSS_LOG_LEVEL", "INFO")
    PROFILE: str = os.getenv("VFSS_PROFILE", "standard")
    RUN_SLOW_TESTS: bool = os.getenv("VFSS_RUN_SLOW", "0") == "1"

    # Split Configuration
    SPLIT_RATIOS = (0.6, 0.2, 0.2)

    # Phantom Configuration
    PHANTOM_SUBJECTS = 40
    PHANTOM_CLIPS_PER_SUBJECT = 5

    def env_overrides(self) -> Dict[str, str]:
        """VFSS_<KEY> variables for every flat pipeline key, read at call time"""
        overrides = {}
        for key in FIELD_MAP:
            value = os.getenv(f"{ENV_PREFIX}{key.upper()}")
            if value is not None and value != "":
                overrides[key] = value
        return overrides

    def profile_defaults(self, profile: Optional[str] = None) -> Dict[str, Any]:
        profile = (profile or os.getenv("VFSS_PROFILE", self.PROFILE)).lower()
        if profile == "standard":
            return {}
        if profile == "fast":
            return {"net_size": FAST_NET_SIZE}
        raise DataValidationError(f"Unknown profile {profile!r} (expected standard or fast)")

    def read_config_file(self, path: Path) -> Dict[str, str]:
        """Flat key=value file, same grammar as .env"""
        path = Path(path)
        if not path.is_file():
            raise DataValidationError(f"Config file not found: {path}")
        values = {key.strip().lower(): value for key, value in dotenv_values(path).items() if value is not None}
        unknown = sorted(set(values) - set(FIELD_MAP))
        if unknown:
            raise DataValidationError(f"{path}: unknown configuration keys {unknown}")
        return values

    def build_pipeline_config(
        self,
        config_file: Optional[Path] = None,
        overrides: Optional[Dict[str, Any]] = None,
        profile: Optional[str] = None
    ) -> PipelineConfig:
        """defaults < profile < environment < config file < explicit overrides"""
        flat: Dict[str, Any] = {}
        flat.update(self.profile_defaults(profile))
        flat.update(self.env_overrides())
        if config_file is not None:
            flat.update(self.read_config_file(config_file))
        flat.update({k: v for k, v in (overrides or {}).items() if v is not None})

        nested: Dict[str, Any] = {}
        for key, value in flat.items():
            if key not in FIELD_MAP:
                raise DataValidationError(f"Unknown configuration key {key!r}")
            section, field = FIELD_MAP[key]
            if field == "clahe_tiles" and isinstance(value, str):
                value = tuple(part.strip() for part in value.split(","))
            if section is None:
                nested[field] = value
            else:
                nested.setdefault(section, {})[field] = value
        # the training seed follows the run seed unless set separately
        if "seed" in nested:
            nested.setdefault("train", {}).setdefault("seed", nested["seed"])
        try:
            return PipelineConfig(**nested)
        except ValidationError as e:
            raise DataValidationError(f"Invalid configuration: {e.errors()[0]['loc']}: {e.errors()[0]['msg']}") from e


# Create singleton config instance
config = Config()
