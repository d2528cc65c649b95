"""
Frame-level pharyngeal phase classifier.

CNN3 / CNN4 are built here from a CnnSpec. Larger backbones plug in through the
registry below; a plugin only has to satisfy ClassifierPlugin.
"""

import logging
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from data.models.errors import DataValidationError
from data.models.schemas import (
    ClassWeighting, CnnSpec, EpochRecord, FramePrediction, ModelCheckpoint,
    PhaseLabel, PhaseSequence, TrainConfig
)

logger = logging.getLogger(__name__)

# Class index order of the softmax output
CLASS_ORDER = (PhaseLabel.N, PhaseLabel.P)


# ============================================================================
# CLASSIFIER INTERFACE AND PLUGINS
# ============================================================================

@runtime_checkable
class ClassifierPlugin(Protocol):
    """What the rest of the pipeline needs from a frame classifier"""
    input_side: int

    def forward_with_features(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return (logits [B, 2], last convolutional feature maps [B, C, h, w])"""
        ...

    def head(self, features: torch.Tensor) -> torch.Tensor:
        """Logits from last convolutional feature maps"""
        ...


_PLUGINS: Dict[str, Callable[[int], nn.Module]] = {}


def register_classifier(name: str):
    """Decorator registering a factory `factory(input_side) -> nn.Module` as plugin:<name>"""
    def decorator(factory: Callable[[int], nn.Module]):
        if name in _PLUGINS:
            raise ValueError(f"Classifier plugin {name!r} already registered")
        _PLUGINS[name] = factory
        return factory
    return decorator


def available_plugins() -> List[str]:
    return sorted(_PLUGINS)


# ============================================================================
# CNN3 / CNN4
# ============================================================================

class PhaseCNN(nn.Module):
    """Blocks of two same-padded 3x3 conv + ReLU followed by 2x2 max pooling, then FC128-FC64-FC2"""

    def __init__(self, spec: CnnSpec):
        super().__init__()
        self.spec = spec
        self.input_side = spec.input_side

        layers: List[nn.Module] = []
        in_channels = 1
        for filters in spec.filters_per_block:
            for _ in range(spec.convs_per_block):
                layers.append(nn.Conv2d(in_channels, filters, spec.conv_kernel, padding=spec.conv_kernel // 2))
                layers.append(nn.ReLU())
                in_channels = filters
            layers.append(nn.MaxPool2d(spec.pool))
        self.features = nn.Sequential(*layers)

        grid = spec.feature_grid
        head: List[nn.Module] = [nn.Flatten()]
        width = in_channels * grid * grid
        for size in spec.fc_sizes:
            head.append(nn.Linear(width, size))
            head.append(nn.ReLU())
            width = size
        head.append(nn.Linear(width, spec.n_classes))
        self.classifier = nn.Sequential(*head)

    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled (He) initialization with zero biases, reproducible from seed"""
        generator = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                std = float(np.sqrt(2.0 / fan_in))
                with torch.no_grad():
                    module.weight.copy_(torch.randn(module.weight.shape, generator=generator) * std)
                    module.bias.zero_()

    def head(self, features: torch.Tensor) -> torch.Tensor:
        return self.classifier(features)

    def forward_with_features(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        features = self.features(x)
        return self.head(features), features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[0]


def build_cnn(spec: CnnSpec, seed: int = 0) -> PhaseCNN:
    model = PhaseCNN(spec)
    model.reset_parameters(seed)
    logger.info(
        f"Built CNN{spec.n_blocks}: input {spec.input_side}px, feature grid "
        f"{spec.feature_grid}x{spec.feature_grid}, {count_parameters(model)} parameters"
    )
    return model


def build_classifier(arch: str, input_side: int, seed: int = 0) -> nn.Module:
    """Resolve 'cnn3', 'cnn4' or 'plugin:<name>'"""
    arch = arch.lower()
    if arch == "cnn3":
        return build_cnn(CnnSpec.cnn3(input_side), seed)
    if arch == "cnn4":
        return build_cnn(CnnSpec.cnn4(input_side), seed)
    if arch.startswith("plugin:"):
        name = arch.split(":", 1)[1]
        if name not in _PLUGINS:
            raise DataValidationError(f"Unknown classifier plugin {name!r}; registered: {available_plugins()}")
        torch.manual_seed(seed)
        model = _PLUGINS[name](input_side)
        if not isinstance(model, ClassifierPlugin):
            raise DataValidationError(f"Plugin {name!r} does not expose forward_with_features/head")
        return model
    raise DataValidationError(f"Unknown architecture {arch!r}; use cnn3, cnn4 or plugin:<name>")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def expected_parameter_count(spec: CnnSpec) -> int:
    """Closed-form parameter count of PhaseCNN(spec)"""
    k2 = spec.conv_kernel * spec.conv_kernel
    total = 0
    in_channels = 1
    for filters in spec.filters_per_block:
        for _ in range(spec.convs_per_block):
            total += k2 * in_channels * filters + filters
            in_channels = filters
    width = in_channels * spec.feature_grid ** 2
    for size in list(spec.fc_sizes) + [spec.n_classes]:
        total += width * size + size
        width = size
    return total


# ============================================================================
# TRAINING
# ============================================================================

def _as_batch(frames: np.ndarray) -> torch.Tensor:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 2:
        frames = frames[None]
    return torch.from_numpy(np.ascontiguousarray(frames)).unsqueeze(1)


def _class_weights(labels: np.ndarray, weighting: ClassWeighting) -> Optional[torch.Tensor]:
    if weighting == ClassWeighting.NONE:
        return None
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    weights = counts.sum() / (2.0 * counts)
    return torch.tensor(weights, dtype=torch.float32)


def _evaluate(model: nn.Module, loader: DataLoader, loss_fn: nn.Module) -> Tuple[float, float]:
    model.eval()
    total_loss, correct, seen = 0.0, 0, 0
    with torch.no_grad():
        for inputs, targets in loader:
            logits = model(inputs)
            total_loss += float(loss_fn(logits, targets)) * len(targets)
            correct += int((logits.argmax(dim=1) == targets).sum())
            seen += len(targets)
    return total_loss / seen, correct / seen


def train(
    model: nn.Module,
    train_frames: np.ndarray,
    train_labels: np.ndarray,
    val_frames: Optional[np.ndarray],
    val_labels: Optional[np.ndarray],
    settings: TrainConfig,
    arch: str = "cnn3"
) -> ModelCheckpoint:
    """Adam + step-decayed learning rate; labels are 0 (N) / 1 (P)"""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_labels) == 0 or len(train_frames) != len(train_labels):
        raise DataValidationError(
            f"Training data is empty or misaligned ({len(train_frames)} frames, {len(train_labels)} labels)"
        )
    if len(np.unique(train_labels)) < 2:
        raise DataValidationError("Training data contains a single class; both N and P frames are required")

    torch.manual_seed(settings.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)

    train_set = TensorDataset(_as_batch(train_frames), torch.from_numpy(train_labels))
    loader = DataLoader(
        train_set, batch_size=settings.batch_size, shuffle=True,
        generator=torch.Generator().manual_seed(settings.seed)
    )
    val_loader = None
    if val_frames is not None and val_labels is not None and len(val_labels) > 0:
        val_set = TensorDataset(_as_batch(val_frames), torch.from_numpy(np.asarray(val_labels, dtype=np.int64)))
        val_loader = DataLoader(val_set, batch_size=max(settings.batch_size, 64), shuffle=False)

    loss_fn = nn.CrossEntropyLoss(weight=_class_weights(train_labels, settings.class_weighting))
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.initial_lr)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=settings.lr_decay_period, gamma=settings.lr_decay_factor
    )

    history: List[EpochRecord] = []
    for epoch in range(settings.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        total_loss, correct, seen = 0.0, 0, 0
        for inputs, targets in loader:
            optimizer.zero_grad()
            logits = model(inputs)
            loss = loss_fn(logits, targets)
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach()) * len(targets)
            correct += int((logits.detach().argmax(dim=1) == targets).sum())
            seen += len(targets)
        scheduler.step()

        record = EpochRecord(epoch=epoch, lr=lr, loss=total_loss / seen, accuracy=correct / seen)
        if val_loader is not None:
            record.val_loss, record.val_accuracy = _evaluate(model, val_loader, loss_fn)
        history.append(record)
        logger.info(
            f"Epoch {epoch + 1}/{settings.epochs} lr={lr:.2e} loss={record.loss:.4f} "
            f"acc={record.accuracy:.4f}"
            + (f" val_loss={record.val_loss:.4f} val_acc={record.val_accuracy:.4f}" if val_loader else "")
        )

    model.eval()
    spec = getattr(model, "spec", None) or CnnSpec(input_side=max(model.input_side, 32))
    return ModelCheckpoint(
        arch=arch,
        spec=spec,
        train_config=settings,
        history=history,
        seed=settings.seed,
        config_hash=settings.config_hash(spec),
        tensors={name: tensor.detach().cpu().numpy().copy() for name, tensor in model.state_dict().items()}
    )


def load_weights(model: nn.Module, checkpoint: ModelCheckpoint) -> nn.Module:
    state = {name: torch.from_numpy(np.array(array)) for name, array in checkpoint.tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model


def model_from_checkpoint(checkpoint: ModelCheckpoint) -> nn.Module:
    if checkpoint.arch in ("cnn3", "cnn4"):
        model = PhaseCNN(checkpoint.spec)
    else:
        model = build_classifier(checkpoint.arch, checkpoint.spec.input_side, checkpoint.seed)
    return load_weights(model, checkpoint)


# ============================================================================
# INFERENCE
# ============================================================================

def _check_side(model: nn.Module, batch: torch.Tensor) -> None:
    side = model.input_side
    if tuple(batch.shape[-2:]) != (side, side):
        raise DataValidationError(f"Model expects {side}x{side} input, got {tuple(batch.shape[-2:])}")


def predict_probabilities(model: nn.Module, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """P-class probability for each frame of a [n, S, S] stack"""
    batch = _as_batch(frames)
    _check_side(model, batch)
    model.eval()
    probs = []
    with torch.no_grad():
        for start in range(0, len(batch), batch_size):
            logits = model(batch[start:start + batch_size])
            probs.append(F.softmax(logits.double(), dim=1)[:, 1].numpy())
    return np.concatenate(probs)


def _prediction_from_prob(prob_p: float) -> FramePrediction:
    prob_p = float(prob_p)
    prob_n = 1.0 - prob_p
    return FramePrediction(
        prob_n=prob_n,
        prob_p=prob_p,
        predicted=PhaseLabel.P if prob_p > prob_n else PhaseLabel.N
    )


def predict_frame(model: nn.Module, net_input: np.ndarray) -> FramePrediction:
    net_input = np.asarray(net_input)
    if net_input.ndim != 2:
        raise DataValidationError(f"Expected a single 2-D network input, got shape {net_input.shape}")
    return _prediction_from_prob(predict_probabilities(model, net_input)[0])


def predict_clip(model: nn.Module, frames: Sequence[np.ndarray]) -> Tuple[PhaseSequence, np.ndarray]:
    """Frame-by-frame classification; returns the P/N sequence and the P-probability trace"""
    if len(frames) == 0:
        raise DataValidationError("Cannot classify an empty clip")
    probs = predict_probabilities(model, np.stack(frames))
    predictions = [_prediction_from_prob(p) for p in probs]
    sequence = PhaseSequence(labels=[prediction.predicted for prediction in predictions])
    return sequence, np.array([prediction.prob_p for prediction in predictions])
