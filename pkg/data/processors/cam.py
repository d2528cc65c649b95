"""
Grad-CAM activation maps on the last convolutional feature maps of a frame classifier.
"""

import logging
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from data.models.errors import DataValidationError
from data.models.schemas import CROP_SIZE, ActivationMap, PhaseLabel
from data.processors.phase_classifier import CLASS_ORDER
from data.processors.preprocess import bilinear_resize

logger = logging.getLogger(__name__)


class GradCAM:
    """Class activation maps from gradients of a pre-softmax logit"""

    def __init__(self, model: nn.Module):
        if not hasattr(model, "forward_with_features"):
            raise DataValidationError(
                f"{type(model).__name__} does not expose last-layer feature maps and gradients"
            )
        self.model = model

    def channel_weights(
        self, net_input: np.ndarray, target_class: Optional[PhaseLabel] = None
    ) -> Tuple[np.ndarray, np.ndarray, PhaseLabel]:
        """Return (spatially averaged logit gradients [C], feature maps [C, h, w], class)"""
        self.model.eval()
        param = next(self.model.parameters())
        x = torch.as_tensor(np.asarray(net_input), dtype=param.dtype)
        x = x.reshape(1, 1, *x.shape[-2:])

        with torch.enable_grad():
            logits, features = self.model.forward_with_features(x)
            if target_class is None:
                class_idx = int(torch.argmax(logits, dim=1).item())
            else:
                class_idx = CLASS_ORDER.index(PhaseLabel(target_class))
            score = logits[0, class_idx]
            gradients, = torch.autograd.grad(score, features)

        weights = gradients[0].mean(dim=(1, 2))
        return (
            weights.detach().cpu().numpy().astype(np.float64),
            features[0].detach().cpu().numpy().astype(np.float64),
            CLASS_ORDER[class_idx]
        )

    def __call__(
        self, net_input: np.ndarray, target_class: Optional[PhaseLabel] = None, frame_id: int = 0
    ) -> ActivationMap:
        weights, features, label = self.channel_weights(net_input, target_class)
        raw = np.maximum(np.tensordot(weights, features, axes=1), 0.0)
        return ActivationMap(
            values=min_max_normalize(raw),
            source_grid=raw.shape,
            frame_id=frame_id,
            target_class=label,
            max_raw_value=float(raw.max())
        )


def min_max_normalize(raw: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a flat positive map becomes all ones, an all-zero map stays zero"""
    low, high = float(raw.min()), float(raw.max())
    if high - low <= np.finfo(np.float64).eps * max(1.0, abs(high)):
        if high > 0:
            return np.ones_like(raw, dtype=np.float64)
        return np.zeros_like(raw, dtype=np.float64)
    values = (raw - low) / (high - low)
    values[raw == high] = 1.0
    return values


def grad_cam(
    model: nn.Module, net_input: np.ndarray,
    target_class: Optional[PhaseLabel] = None, frame_id: int = 0
) -> ActivationMap:
    """Grad-CAM for the top predicted class unless a target class is given"""
    return GradCAM(model)(net_input, target_class, frame_id)


def upsample_map(activation: ActivationMap, side: int = CROP_SIZE) -> ActivationMap:
    return ActivationMap(
        values=bilinear_resize(activation.values, side, side),
        source_grid=activation.source_grid,
        frame_id=activation.frame_id,
        target_class=activation.target_class,
        max_raw_value=activation.max_raw_value
    )
