"""
Frame preprocessing: center crop, CLAHE, [0, 1] normalization and network resize.
"""

import logging
from typing import Tuple

import cv2
import numpy as np

from data.models.errors import DataValidationError
from data.models.schemas import CROP_SIZE, PreprocessConfig

logger = logging.getLogger(__name__)


def crop_offsets(height: int, width: int, size: int = CROP_SIZE) -> Tuple[int, int]:
    """Top-left (row, col) of the centered size x size window"""
    return (height - size) // 2, (width - size) // 2


def center_crop(frame: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise DataValidationError(f"Expected a 2-D grayscale frame, got shape {frame.shape}")
    height, width = frame.shape
    if height < size or width < size:
        raise DataValidationError(f"Frame {height}x{width} is smaller than the {size}x{size} crop")
    row, col = crop_offsets(height, width, size)
    return frame[row:row + size, col:col + size].copy()


def clahe(frame: np.ndarray, clip_limit: float = 2.0, tile_grid: Tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on an 8-bit frame"""
    if clip_limit <= 0:
        raise DataValidationError(f"CLAHE clip limit must be positive, got {clip_limit}")
    if len(tile_grid) != 2 or tile_grid[0] <= 0 or tile_grid[1] <= 0:
        raise DataValidationError(f"CLAHE tile grid must be two positive integers, got {tile_grid}")
    frame = np.asarray(frame)
    if frame.dtype != np.uint8:
        raise DataValidationError(f"CLAHE expects uint8 input, got {frame.dtype}")
    equalizer = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(int(tile_grid[1]), int(tile_grid[0])))
    return equalizer.apply(np.ascontiguousarray(frame))


def normalize(frame: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.shape != (size, size):
        raise DataValidationError(f"Expected a {size}x{size} frame, got {frame.shape}")
    return frame.astype(np.float64) / 255.0


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment, clamped to [0, 1]"""
    image = np.asarray(image, dtype=np.float64)
    if image.shape == (height, width):
        return np.clip(image, 0.0, 1.0)
    resized = cv2.resize(image, (width, height), interpolation=cv2.INTER_LINEAR)
    return np.clip(resized, 0.0, 1.0)


def resize_to_net(frame: np.ndarray, side: int) -> np.ndarray:
    if side < 32:
        raise DataValidationError(f"Network input side must be at least 32, got {side}")
    return bilinear_resize(frame, side, side).astype(np.float32)


def preprocess_frame(raw: np.ndarray, settings: PreprocessConfig) -> np.ndarray:
    """Raw 8-bit frame -> ProcFrame (crop_size x crop_size, float64 in [0, 1])"""
    cropped = center_crop(raw, settings.crop_size)
    enhanced = clahe(cropped, settings.clahe_clip, settings.clahe_tiles)
    return normalize(enhanced, settings.crop_size)


def to_net_input(raw: np.ndarray, settings: PreprocessConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Return (ProcFrame, NetInput) for one raw frame"""
    proc = preprocess_frame(raw, settings)
    return proc, resize_to_net(proc, settings.net_size)
