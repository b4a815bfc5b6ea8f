"""Attribution maps for (classifier, image) pairs: CAM, GradCAM, and RTS.

All three interpreters share one post-processing pipeline so their maps are
directly comparable: clamp negatives to zero, bilinearly upsample to the input
resolution, then max-normalize per image. CAM weights the last conv feature
map with the dense-head row of the explained class; GradCAM derives the same
channel weights from gradients of the class logit; RTS is a trained masking
network that needs a single forward pass and no classifier gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .classifiers import GatedReLU, capture_activations, predict
from .data import ImageBatch, Split, augment, batch_for_iteration, batches_per_epoch
from .utils import derive_seed

INTERPRETER_TAGS = ("cam", "gradcam", "rts")
INTERPRETER_LABELS = {"cam": "CAM", "gradcam": "GradCAM", "rts": "RTS"}
_PROB_FLOOR = 1e-12


class InterpreterError(ValueError):
    """Interpreter/classifier mismatch or contract violation."""


@dataclass
class AttributionMap:
    """Per-image saliency in [0, 1] at input resolution, max-normalized."""

    values: torch.Tensor  # [N, H, W]
    interpreter_tag: str
    class_index: torch.Tensor  # [N]

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InterpreterError(f"map values must be [N, H, W], got {tuple(self.values.shape)}")
        if self.interpreter_tag not in INTERPRETER_TAGS:
            raise InterpreterError(f"unknown interpreter tag {self.interpreter_tag!r}")


def postprocess_map(raw: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
    """Clamp negatives, bilinearly upsample to ``out_size``, max-normalize.

    Idempotent: applying it twice is bitwise identical to applying it once.
    Identically zero maps stay zero instead of being normalized.
    """
    if raw.ndim != 3:
        raise InterpreterError(f"raw map must be [N, h, w], got {tuple(raw.shape)}")
    maps = raw.clamp_min(0.0)
    if tuple(maps.shape[-2:]) != tuple(out_size):
        maps = F.interpolate(
            maps.unsqueeze(1), size=tuple(out_size), mode="bilinear", align_corners=True
        ).squeeze(1)
    peak = maps.flatten(1).max(dim=1).values
    # identically zero maps stay zero; otherwise the peak divides out to exactly 1.0
    safe_peak = torch.where(peak > 0, peak, torch.ones_like(peak))
    return maps / safe_peak.view(-1, 1, 1)


def resolve_classes(model: nn.Module, pixels: torch.Tensor, class_select) -> torch.Tensor:
    """Turn a class selector into a per-image index vector.

    "predicted" uses the model's argmax on ``pixels``; an int applies to every
    image; a tensor is passed through.
    """
    if isinstance(class_select, str):
        if class_select != "predicted":
            raise InterpreterError(f"unknown class selector {class_select!r}")
        return predict(model, pixels).argmax(dim=1)
    if isinstance(class_select, int):
        return torch.full((pixels.shape[0],), class_select, dtype=torch.long)
    classes = torch.as_tensor(class_select, dtype=torch.long)
    if classes.shape != (pixels.shape[0],):
        raise InterpreterError("class index vector must have one entry per image")
    return classes


def cam_values(model: nn.Module, pixels: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
    """Differentiable post-processed CAM maps [N, H, W]."""
    feature_map, _ = capture_activations(model, pixels)
    weights = model.head.weight[classes]  # [N, K]
    raw = torch.einsum("nkhw,nk->nhw", feature_map, weights)
    return postprocess_map(raw, pixels.shape[-2:])


def gradcam_values(
    model: nn.Module,
    pixels: torch.Tensor,
    classes: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Differentiable post-processed GradCAM maps [N, H, W].

    Channel weights are the spatial mean of d(logit_c)/dA. ``create_graph``
    keeps the weight computation in the autograd graph so the maps can be
    differentiated again during attack training.
    """
    with torch.enable_grad():
        x = pixels if pixels.requires_grad else pixels.detach().requires_grad_(True)
        feature_map, logits = capture_activations(model, x)
        if not feature_map.requires_grad:
            raise InterpreterError(
                "gradients unavailable: feature map is detached from the graph"
            )
        score = logits.gather(1, classes.view(-1, 1)).sum()
        (grad_a,) = torch.autograd.grad(score, feature_map, create_graph=create_graph)
        weights = grad_a.mean(dim=(2, 3))  # (1/V) * sum_ij d logit_c / dA
        raw = torch.einsum("nkhw,nk->nhw", feature_map, weights)
        return postprocess_map(raw, pixels.shape[-2:])


def cam_attribution(model: nn.Module, pixels: torch.Tensor, class_select="predicted") -> AttributionMap:
    classes = resolve_classes(model, pixels, class_select)
    with torch.no_grad():
        values = cam_values(model, pixels, classes)
    return AttributionMap(values.detach(), "cam", classes)


def gradcam_attribution(
    model: nn.Module, pixels: torch.Tensor, class_select="predicted"
) -> AttributionMap:
    classes = resolve_classes(model, pixels, class_select)
    values = gradcam_values(model, pixels, classes, create_graph=False)
    return AttributionMap(values.detach(), "gradcam", classes)


class RTSModel(nn.Module):
    """Masking network: encoder to a latent grid, decoder to a [0, 1] mask."""

    def __init__(self, image_size: tuple[int, int], base_width: int = 16, trained_against: str = ""):
        super().__init__()
        h, w = image_size
        if h % 8 or w % 8:
            raise InterpreterError(f"RTS needs H, W divisible by 8, got {h}x{w}")
        c = base_width
        self.encoder_net = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.BatchNorm2d(2 * c), nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.BatchNorm2d(4 * c), nn.ReLU(inplace=True),
            nn.Conv2d(4 * c, 4 * c, 3, stride=2, padding=1), nn.BatchNorm2d(4 * c), nn.ReLU(inplace=True),
        )
        self.decoder_net = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * c, 2 * c, 3, padding=1), nn.BatchNorm2d(2 * c), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, 1, 1),
        )
        self.image_size = tuple(image_size)
        self.base_width = base_width
        self.trained_against = trained_against

    def encoder(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder_net(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.image_size:
            raise InterpreterError(
                f"RTS trained for {self.image_size}, got {tuple(x.shape[-2:])}"
            )
        return torch.sigmoid(self.decoder_net(self.encoder(x)))


@dataclass
class RTSTrainConfig:
    """Loss weights and blend settings for mask-network training."""

    lambda_tv: float = 1.0
    lambda_av: float = 1.0
    lambda_destroy: float = 1.0
    lambda_power: float = 1.0
    background: str = "blur"  # or "uniform-noise"
    blur_sigma: float = 2.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 6
    seed: int = 0
    base_width: int = 16

    def __post_init__(self):
        for name in ("lambda_tv", "lambda_av", "lambda_destroy", "lambda_power"):
            if getattr(self, name) < 0:
                raise InterpreterError(f"{name} must be >= 0")
        if self.background not in ("blur", "uniform-noise"):
            raise InterpreterError(f"unknown background kind {self.background!r}")


def _gaussian_kernel(sigma: float, radius: int = 3) -> torch.Tensor:
    ax = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k1 = torch.exp(-(ax**2) / (2 * sigma**2))
    k1 = k1 / k1.sum()
    return torch.outer(k1, k1)


def gaussian_blur(x: torch.Tensor, sigma: float = 2.0) -> torch.Tensor:
    kernel = _gaussian_kernel(sigma)
    k = kernel.view(1, 1, *kernel.shape).expand(x.shape[1], 1, -1, -1)
    pad = kernel.shape[0] // 2
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(padded, k, groups=x.shape[1])


def make_background(x: torch.Tensor, kind: str, sigma: float = 2.0, seed: int = 0) -> torch.Tensor:
    if kind == "blur":
        return gaussian_blur(x, sigma)
    if kind == "uniform-noise":
        gen = torch.Generator().manual_seed(int(seed))
        return torch.rand(x.shape, generator=gen)
    raise InterpreterError(f"unknown background kind {kind!r}")


def blend_with_background(x: torch.Tensor, mask: torch.Tensor, background: torch.Tensor) -> torch.Tensor:
    """phi(x, mask): mask-weighted blend; all-ones keeps x, all-zeros keeps background."""
    if mask.ndim == 3:
        mask = mask.unsqueeze(1)
    return mask * x + (1.0 - mask) * background


def total_variation(mask: torch.Tensor) -> torch.Tensor:
    dy = (mask[..., 1:, :] - mask[..., :-1, :]).abs().mean()
    dx = (mask[..., :, 1:] - mask[..., :, :-1]).abs().mean()
    return dy + dx


def train_rts(
    classifier: nn.Module,
    train_split: Split,
    cfg: RTSTrainConfig,
    *,
    augment_cfg=None,
    trained_against: str = "",
) -> tuple[RTSModel, list[float]]:
    """Train a mask network against a frozen classifier; returns (model, curve).

    The objective trades off mask smoothness and sparsity against keeping the
    masked image classified as its original class while the complementary
    blend loses that class.
    """
    if len(train_split) == 0:
        raise InterpreterError("empty training split")
    num_from_head = classifier.head.out_features
    if num_from_head != classifier.num_classes:
        raise InterpreterError("classifier head/class-count mismatch")
    image_size = tuple(train_split.pixels.shape[-2:])
    torch.manual_seed(derive_seed(cfg.seed, "rts-init"))
    rts = RTSModel(image_size, cfg.base_width, trained_against=trained_against)
    classifier.eval()
    optimizer = torch.optim.Adam(rts.parameters(), lr=cfg.learning_rate)
    steps_per_epoch = batches_per_epoch(train_split, cfg.batch_size)
    curve: list[float] = []
    rts.train()
    step = 0
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            px, labels, _ = batch_for_iteration(
                train_split, cfg.batch_size, derive_seed(cfg.seed, "rts-batches"), step
            )
            if augment_cfg is not None:
                px = augment(ImageBatch(px, labels), augment_cfg, derive_seed(cfg.seed, "rts-aug", step)).pixels
            with torch.no_grad():
                classes = classifier(px).argmax(dim=1)
            mask = rts(px)
            background = make_background(
                px, cfg.background, cfg.blur_sigma, derive_seed(cfg.seed, "rts-bg", step)
            )
            keep_probs = F.softmax(classifier(blend_with_background(px, mask, background)), dim=1)
            drop_probs = F.softmax(classifier(blend_with_background(px, 1.0 - mask, background)), dim=1)
            keep_c = keep_probs.gather(1, classes.view(-1, 1)).clamp_min(_PROB_FLOOR)
            drop_c = drop_probs.gather(1, classes.view(-1, 1)).clamp_min(_PROB_FLOOR)
            loss = (
                cfg.lambda_tv * total_variation(mask)
                + cfg.lambda_av * mask.mean()
                - torch.log(keep_c).mean()
                + cfg.lambda_destroy * (drop_c**cfg.lambda_power).mean()
            )
            if not torch.isfinite(loss):
                raise InterpreterError(f"RTS training diverged at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss))
            step += 1
        curve.append(sum(epoch_losses) / len(epoch_losses))
    rts.eval()
    return rts, curve


def rts_attribution(rts: RTSModel, pixels: torch.Tensor) -> AttributionMap:
    """Single forward pass through the mask network; no classifier involved."""
    with torch.no_grad():
        values = postprocess_map(rts(pixels).squeeze(1), pixels.shape[-2:])
    classes = torch.full((pixels.shape[0],), -1, dtype=torch.long)
    return AttributionMap(values, "rts", classes)


def rts_values(rts: RTSModel, pixels: torch.Tensor) -> torch.Tensor:
    """Differentiable post-processed RTS maps."""
    return postprocess_map(rts(pixels).squeeze(1), pixels.shape[-2:])


def attribution_values(
    tag: str,
    classifier: nn.Module,
    pixels: torch.Tensor,
    classes: torch.Tensor,
    rts: RTSModel | None = None,
    create_graph: bool = False,
) -> torch.Tensor:
    """Differentiable post-processed maps for any interpreter tag."""
    if tag == "cam":
        return cam_values(classifier, pixels, classes)
    if tag == "gradcam":
        return gradcam_values(classifier, pixels, classes, create_graph=create_graph)
    if tag == "rts":
        if rts is None:
            raise InterpreterError("RTS interpreter requires a trained RTS model")
        return rts_values(rts, pixels)
    raise InterpreterError(f"unknown interpreter tag {tag!r}")


def compute_attribution(
    tag: str,
    classifier: nn.Module,
    pixels: torch.Tensor,
    class_select="predicted",
    rts: RTSModel | None = None,
) -> AttributionMap:
    """Evaluation-mode attribution (detached values)."""
    classes = resolve_classes(classifier, pixels, class_select)
    if tag == "rts":
        if rts is None:
            raise InterpreterError("RTS interpreter requires a trained RTS model")
        return AttributionMap(rts_values(rts, pixels).detach(), "rts", classes)
    values = attribution_values(tag, classifier, pixels, classes, rts=rts)
    return AttributionMap(values.detach(), tag, classes)


def binarize(
    maps, rule: str = "top-fraction", fraction: float = 0.2, threshold: float = 0.5
) -> torch.Tensor:
    """Binary masks from attribution maps.

    "top-fraction" thresholds each image at its own ceil(fraction*H*W)-th
    largest value (scale invariant under max-normalization); "fixed" compares
    against an absolute threshold. A pixel is set when its value >= threshold,
    so ties are included.
    """
    values = maps.values if isinstance(maps, AttributionMap) else maps
    if values.ndim == 2:
        values = values.unsqueeze(0)
    n, h, w = values.shape
    flat = values.reshape(n, h * w)
    if rule == "fixed":
        return (values >= threshold).to(torch.bool)
    if rule != "top-fraction":
        raise InterpreterError(f"unknown binarization rule {rule!r}")
    if not (0.0 < fraction <= 1.0):
        raise InterpreterError("fraction must be in (0, 1]")
    k = max(1, math.ceil(fraction * h * w))
    kth = flat.kthvalue(h * w - k + 1, dim=1).values
    return (values >= kth.view(-1, 1, 1)).to(torch.bool)
