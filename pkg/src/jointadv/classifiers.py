"""Trainable image classifiers with inspectable internals.

Both architectures end in global average pooling followed by a single dense
layer, so activation-based attribution applies without surgery and the logits
can be reconstructed exactly from the last convolutional feature map. An
optional smoothed-ReLU mode replaces the ReLU *backward* gate with a bounded
smooth function, which keeps double backpropagation through gradient-based
attribution well behaved during attack training; forward passes are plain
ReLU in every mode.
"""
from __future__ import annotations

import io
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .data import AugmentConfig, ImageBatch, Split, augment, batch_for_iteration, batches_per_epoch
from .utils import atomic_torch_save, atomic_write_json, derive_seed

ARCHITECTURES = ("residual-small", "dense-small")
GATE_KINDS = ("verbatim", "halved-sigmoid")
DEFAULT_TAU = 1e-4


class ModelError(ValueError):
    """Architecture or shape contract violation."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def _gate_values(s: torch.Tensor, tau: float, kind: str) -> torch.Tensor:
    ratio = s / torch.sqrt(s * s + tau)
    if kind == "verbatim":
        # the s >= 0 branch owns s = 0, where the gate evaluates to 0
        return torch.where(s < 0, 1.0 + ratio, ratio)
    if kind == "halved-sigmoid":
        return 0.5 * (1.0 + ratio)
    raise ModelError(f"unknown gate kind {kind!r}")


def smoothed_relu_gate(s, tau: float = DEFAULT_TAU, kind: str = "verbatim"):
    """Bounded replacement for the ReLU derivative.

    Evaluates 1(s<0)*(1 + s/sqrt(s^2+tau)) + 1(s>=0)*(s/sqrt(s^2+tau));
    the "halved-sigmoid" kind is the smooth alternative (1 + s/sqrt(s^2+tau))/2.
    Accepts floats or tensors.
    """
    if isinstance(s, torch.Tensor):
        return _gate_values(s, tau, kind)
    value = _gate_values(torch.tensor(float(s), dtype=torch.float64), tau, kind)
    return float(value)


def smoothed_relu(s, tau: float = DEFAULT_TAU):
    """Activation whose branchwise derivative is the verbatim gate.

    1(s<0)*(s + sqrt(s^2+tau)) + 1(s>=0)*sqrt(s^2+tau); continuous at 0 and
    tends to ReLU as tau -> 0.
    """
    scalar = not isinstance(s, torch.Tensor)
    t = torch.as_tensor(s, dtype=torch.float64 if scalar else None)
    root = torch.sqrt(t * t + tau)
    value = torch.where(t < 0, t + root, root)
    return float(value) if scalar else value


class _GateOverriddenReLU(torch.autograd.Function):
    """Forward is exact ReLU; backward multiplies by the smoothed gate."""

    @staticmethod
    def forward(ctx, s: torch.Tensor, tau: float, kind: str) -> torch.Tensor:
        ctx.save_for_backward(s)
        ctx.tau = tau
        ctx.kind = kind
        return F.relu(s)

    @staticmethod
    def backward(ctx, grad_output):
        (s,) = ctx.saved_tensors
        return grad_output * _gate_values(s, ctx.tau, ctx.kind), None, None


class GatedReLU(nn.Module):
    """ReLU with a switchable backward gate.

    mode "standard-relu" is a plain ReLU; mode "smoothed-relu" keeps the ReLU
    forward but routes gradients through the smoothed gate.
    """

    def __init__(self):
        super().__init__()
        self.mode = "standard-relu"
        self.tau = DEFAULT_TAU
        self.gate_kind = "verbatim"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "standard-relu":
            return F.relu(x)
        return _GateOverriddenReLU.apply(x, self.tau, self.gate_kind)

    def extra_repr(self) -> str:
        return f"mode={self.mode}"


def set_activation_mode(
    model: nn.Module,
    mode: str,
    tau: float = DEFAULT_TAU,
    gate_kind: str = "verbatim",
) -> None:
    """Switch every gated activation in ``model``; no-op for other modules."""
    if mode not in ("standard-relu", "smoothed-relu"):
        raise ModelError(f"unknown activation mode {mode!r}")
    if gate_kind not in GATE_KINDS:
        raise ModelError(f"unknown gate kind {gate_kind!r}")
    if mode == "smoothed-relu" and tau <= 0:
        raise ModelError("smoothed-relu requires tau > 0")
    for module in model.modules():
        if isinstance(module, GatedReLU):
            module.mode = mode
            module.tau = tau
            module.gate_kind = gate_kind
    model.activation_mode = mode


def activation_mode(model: nn.Module) -> str:
    return getattr(model, "activation_mode", "standard-relu")


class _ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.act1 = GatedReLU()
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act2 = GatedReLU()
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = self.act1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.act2(out + skip)


class SmallResNet(nn.Module):
    """Residual classifier: stem + 3 stages, GAP head. Tag "residual-small"."""

    architecture_tag = "residual-small"

    def __init__(self, num_classes: int, base_width: int = 16, in_channels: int = 3):
        super().__init__()
        w = base_width
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, padding=1, bias=False),
            nn.BatchNorm2d(w),
            GatedReLU(),
        )
        self.layer1 = _ResidualBlock(w, w, stride=1)
        self.layer2 = _ResidualBlock(w, 2 * w, stride=2)
        self.layer3 = _ResidualBlock(2 * w, 4 * w, stride=2)
        self.head = nn.Linear(4 * w, num_classes)
        self.num_classes = num_classes
        self.base_width = base_width
        self.activation_mode = "standard-relu"

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        return self.layer3(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).mean(dim=(2, 3)))


class _DenseLayer(nn.Module):
    def __init__(self, cin: int, growth: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(cin)
        self.act = GatedReLU()
        self.conv = nn.Conv2d(cin, growth, 3, padding=1, bias=False)

    def forward(self, x):
        return torch.cat([x, self.conv(self.act(self.bn(x)))], dim=1)


class _Transition(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(cin)
        self.act = GatedReLU()
        self.conv = nn.Conv2d(cin, cout, 1, bias=False)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        return self.pool(self.conv(self.act(self.bn(x))))


class SmallDenseNet(nn.Module):
    """Densely connected classifier with a GAP head. Tag "dense-small"."""

    architecture_tag = "dense-small"

    def __init__(self, num_classes: int, base_width: int = 16, in_channels: int = 3):
        super().__init__()
        growth = base_width
        channels = 2 * growth
        self.stem = nn.Conv2d(in_channels, channels, 3, padding=1, bias=False)
        blocks = []
        for block_index in range(3):
            for _ in range(3):
                blocks.append(_DenseLayer(channels, growth))
                channels += growth
            if block_index < 2:
                blocks.append(_Transition(channels, channels // 2))
                channels //= 2
        self.blocks = nn.Sequential(*blocks)
        self.final_bn = nn.BatchNorm2d(channels)
        self.final_act = GatedReLU()
        self.head = nn.Linear(channels, num_classes)
        self.num_classes = num_classes
        self.base_width = base_width
        self.activation_mode = "standard-relu"

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.final_act(self.final_bn(self.blocks(self.stem(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).mean(dim=(2, 3)))


def build_classifier(
    arch: str, num_classes: int, base_width: int = 16, seed: int = 0
) -> nn.Module:
    if num_classes < 2:
        raise ModelError("classifiers need num_classes >= 2")
    torch.manual_seed(derive_seed(seed, "classifier-init", arch))
    if arch == "residual-small":
        return SmallResNet(num_classes, base_width)
    if arch == "dense-small":
        return SmallDenseNet(num_classes, base_width)
    raise ModelError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def capture_activations(model: nn.Module, pixels: torch.Tensor):
    """Return (A, logits) where A is the pre-pooling feature map the head uses.

    The identity head(A.mean((2, 3))) == logits holds exactly; that is what
    makes activation-based attribution well defined for these models.
    """
    if not hasattr(model, "features") or not hasattr(model, "head"):
        raise ModelError(
            f"{type(model).__name__} does not expose a last-conv tap (features/head)"
        )
    feature_map = model.features(pixels)
    logits = model.head(feature_map.mean(dim=(2, 3)))
    return feature_map, logits


def predict(model: nn.Module, batch) -> torch.Tensor:
    """Deterministic eval-mode logits [N, k]."""
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    if pixels.ndim != 4:
        raise ModelError(f"expected [N, C, H, W] input, got {tuple(pixels.shape)}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(pixels)
    finally:
        model.train(was_training)
    return logits


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    weight_decay: float = 0.0
    augment: AugmentConfig = field(
        default_factory=lambda: AugmentConfig(
            random_crop=True, crop_padding=2, horizontal_flip=True, flip_prob=0.5
        )
    )

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ModelError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ModelError("batch_size and epochs must be >= 1")


def _make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(
            params, lr=cfg.learning_rate, momentum=0.9, weight_decay=cfg.weight_decay
        )
    raise ModelError(f"unknown optimizer {cfg.optimizer!r}")


def evaluate_top1(model: nn.Module, split: Split, batch_size: int = 256) -> float:
    if len(split) == 0:
        raise ModelError("cannot evaluate on an empty split")
    correct = 0
    for start in range(0, len(split), batch_size):
        logits = predict(model, split.pixels[start : start + batch_size])
        correct += int((logits.argmax(dim=1) == split.labels[start : start + batch_size]).sum())
    return correct / len(split)


def train_classifier(
    train_split: Split,
    cfg: TrainConfig,
    arch: str = "residual-small",
    *,
    num_classes: int,
    base_width: int = 16,
    eval_split: Split | None = None,
    checkpoint_path: Path | None = None,
    image_size: tuple[int, int] | None = None,
) -> tuple[nn.Module, float]:
    """Train a classifier from scratch; returns (model, top-1 on eval split).

    Raises DivergenceError on a non-finite loss. When ``checkpoint_path`` is
    given, the parameters plus a JSON sidecar are persisted atomically.
    """
    if len(train_split) == 0:
        raise ModelError("empty training split")
    model = build_classifier(arch, num_classes, base_width, seed=cfg.seed)
    optimizer = _make_optimizer(cfg, model.parameters())
    steps_per_epoch = batches_per_epoch(train_split, cfg.batch_size)
    model.train()
    for step in range(cfg.epochs * steps_per_epoch):
        px, labels, _ = batch_for_iteration(
            train_split, cfg.batch_size, derive_seed(cfg.seed, "train-batches"), step
        )
        batch = augment(ImageBatch(px, labels), cfg.augment, derive_seed(cfg.seed, "aug", step))
        optimizer.zero_grad()
        loss = F.cross_entropy(model(batch.pixels), batch.labels)
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"non-finite training loss at step {step} "
                f"(epoch {step // steps_per_epoch})",
                step=step,
            )
        loss.backward()
        optimizer.step()
    model.eval()
    top1 = evaluate_top1(model, eval_split if eval_split is not None else train_split)
    if checkpoint_path is not None:
        if image_size is None:
            image_size = tuple(train_split.pixels.shape[-2:])
        save_checkpoint(
            model,
            checkpoint_path,
            top1=top1,
            seed=cfg.seed,
            image_size=image_size,
            train_config=asdict(cfg),
        )
    return model, top1


def save_checkpoint(
    model: nn.Module,
    path: Path,
    *,
    top1: float | None = None,
    seed: int | None = None,
    image_size: tuple[int, int] | None = None,
    train_config: dict | None = None,
) -> Path:
    """Persist parameters (single archive) plus a JSON sidecar, atomically."""
    path = Path(path)
    payload = {
        "state_dict": model.state_dict(),
        "architecture_tag": model.architecture_tag,
        "num_classes": model.num_classes,
        "base_width": model.base_width,
    }
    atomic_torch_save(payload, path)
    sidecar = {
        "architecture_tag": model.architecture_tag,
        "num_classes": model.num_classes,
        "base_width": model.base_width,
        "image_size": list(image_size) if image_size else None,
        "top1": top1,
        "seed": seed,
        "train_config": train_config,
    }
    atomic_write_json(path.with_suffix(".json"), sidecar)
    return path


def load_checkpoint(path: Path) -> tuple[nn.Module, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"classifier checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = build_classifier(
        payload["architecture_tag"], payload["num_classes"], payload["base_width"]
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    sidecar_path = path.with_suffix(".json")
    sidecar = {}
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    return model, sidecar
