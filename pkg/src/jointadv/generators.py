"""Noise-to-perturbation generators and norm-ball scaling.

A generator maps a fixed uniform noise image to a raw perturbation; the raw
output is rescaled so its p-norm never exceeds the budget zeta. Both
architectures share the image-to-image contract (output shape == input shape)
and a tanh output, so the raw perturbation is bounded before scaling.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .data import ImageBatch
from .utils import atomic_write_json, derive_seed

GENERATOR_ARCHITECTURES = ("residual-gen", "unet-gen")

# reference pixel count for rescaling L2 budgets across resolutions
_REFERENCE_DIM = 3 * 224 * 224
_NORM_SLACK = 1e-6


class GeneratorError(ValueError):
    """Shape or norm contract violation."""


def _check_p(p) -> float:
    if p in (2, 2.0):
        return 2.0
    if p in (float("inf"), math.inf, "inf"):
        return math.inf
    raise GeneratorError(f"unsupported norm p={p!r}; use 2 or inf")


def perturbation_norm(values: torch.Tensor, p) -> float:
    """Exact p-norm computed in float64 (used for artifacts and validation)."""
    p = _check_p(p)
    flat = values.detach().double().flatten()
    if p == 2.0:
        return float(torch.linalg.vector_norm(flat, 2))
    return float(flat.abs().max()) if flat.numel() else 0.0


def default_zeta(p, image_shape: tuple[int, int, int]) -> float:
    """Norm budgets rescaled to the canonical [0, 1] range at desk resolution.

    The L-inf budget is 10/255 independent of resolution; the L2 budget scales
    with sqrt(pixel count) so the per-pixel magnitude matches the 224x224
    reference budget of 2000 in 0-255 units.
    """
    p = _check_p(p)
    if p == math.inf:
        return 10.0 / 255.0
    d = int(np.prod(image_shape))
    return (2000.0 / 255.0) * math.sqrt(d / _REFERENCE_DIM)


@dataclass
class Perturbation:
    """A single image-shaped additive perturbation with norm metadata."""

    values: torch.Tensor
    norm_p: float
    zeta: float
    achieved_norm: float

    def __post_init__(self):
        self.norm_p = _check_p(self.norm_p)
        if self.values.ndim != 3:
            raise GeneratorError(f"values must be [C, H, W], got {tuple(self.values.shape)}")
        if self.zeta <= 0:
            raise GeneratorError("zeta must be positive")
        if self.achieved_norm > self.zeta + _NORM_SLACK:
            raise GeneratorError(
                f"norm constraint violated: {self.achieved_norm} > {self.zeta} + {_NORM_SLACK}"
            )


def sample_noise(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    """Uniform [0, 1) noise, deterministic per seed."""
    if any(int(s) < 1 for s in shape):
        raise GeneratorError(f"noise shape must be positive, got {shape}")
    gen = torch.Generator().manual_seed(int(seed))
    return torch.rand(tuple(int(s) for s in shape), generator=gen)


def _norm_for_graph(values: torch.Tensor, p: float) -> torch.Tensor:
    flat = values.flatten()
    if p == 2.0:
        return torch.linalg.vector_norm(flat, 2)
    return flat.abs().max()


def scale_to_norm_ball(raw: torch.Tensor, p, zeta: float) -> torch.Tensor:
    """min(1, zeta / ||raw||_p) * raw, differentiable wherever the norm is nonzero."""
    p = _check_p(p)
    if zeta <= 0:
        raise GeneratorError("zeta must be positive")
    norm = _norm_for_graph(raw, p)
    if float(norm.detach()) == 0.0:
        warnings.warn("generator emitted a zero perturbation; returning zeros")
        return raw * 0.0
    factor = torch.clamp(zeta / norm, max=1.0)
    return raw * factor


def _conv_in_relu(cin: int, cout: int, stride: int = 1, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


def _upsample_conv(cin: int, cout: int, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, cout, 3, padding=1),
    ]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class _GenResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return torch.relu(x + self.body(x))


class ResidualGenerator(nn.Module):
    """3 downsampling convs, 4 residual blocks, 3 upsampling convs, tanh output.

    Requires H and W divisible by 8. Tag "residual-gen".
    """

    architecture_tag = "residual-gen"

    def __init__(self, image_shape: tuple[int, int, int], base_channels: int = 16):
        super().__init__()
        c, h, w = image_shape
        if h % 8 or w % 8:
            raise GeneratorError(f"residual-gen needs H, W divisible by 8, got {h}x{w}")
        cb = base_channels
        self.down = nn.Sequential(
            _conv_in_relu(c, cb, stride=2),
            _conv_in_relu(cb, 2 * cb, stride=2),
            _conv_in_relu(2 * cb, 4 * cb, stride=2),
        )
        self.blocks = nn.Sequential(*[_GenResBlock(4 * cb) for _ in range(4)])
        self.up = nn.Sequential(
            _upsample_conv(4 * cb, 2 * cb),
            _upsample_conv(2 * cb, cb),
            _upsample_conv(cb, cb),
        )
        self.out = nn.Conv2d(cb, c, 1)
        self.image_shape = tuple(image_shape)

    def forward(self, x):
        return torch.tanh(self.out(self.up(self.blocks(self.down(x)))))


class UNetGenerator(nn.Module):
    """Five-level encoder-decoder with skip connections, tanh output.

    Requires H and W divisible by 16. Tag "unet-gen". Instance norm is skipped
    on levels whose spatial extent is too small for meaningful statistics.
    """

    architecture_tag = "unet-gen"

    def __init__(self, image_shape: tuple[int, int, int], base_channels: int = 16):
        super().__init__()
        c, h, w = image_shape
        if h % 16 or w % 16:
            raise GeneratorError(f"unet-gen needs H, W divisible by 16, got {h}x{w}")
        cb = base_channels
        widths = [cb, 2 * cb, 4 * cb, 8 * cb, 8 * cb]
        sizes = [min(h, w) >> level for level in range(5)]
        norms = [s >= 4 for s in sizes]
        self.enc1 = _conv_in_relu(c, widths[0], stride=1, norm=norms[0])
        self.enc2 = _conv_in_relu(widths[0], widths[1], stride=2, norm=norms[1])
        self.enc3 = _conv_in_relu(widths[1], widths[2], stride=2, norm=norms[2])
        self.enc4 = _conv_in_relu(widths[2], widths[3], stride=2, norm=norms[3])
        self.enc5 = _conv_in_relu(widths[3], widths[4], stride=2, norm=norms[4])
        self.dec4 = _upsample_conv(widths[4], widths[3], norm=norms[3])
        self.dec3 = _upsample_conv(widths[3] * 2, widths[2], norm=norms[2])
        self.dec2 = _upsample_conv(widths[2] * 2, widths[1], norm=norms[1])
        self.dec1 = _upsample_conv(widths[1] * 2, widths[0], norm=norms[0])
        self.out = nn.Conv2d(widths[0] * 2, c, 1)
        self.image_shape = tuple(image_shape)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        e5 = self.enc5(e4)
        d4 = self.dec4(e5)
        d3 = self.dec3(torch.cat([d4, e4], dim=1))
        d2 = self.dec2(torch.cat([d3, e3], dim=1))
        d1 = self.dec1(torch.cat([d2, e2], dim=1))
        return torch.tanh(self.out(torch.cat([d1, e1], dim=1)))


def build_generator(
    arch: str,
    image_shape: tuple[int, int, int],
    base_channels: int = 16,
    seed: int = 0,
) -> nn.Module:
    torch.manual_seed(derive_seed(seed, "generator-init", arch))
    if arch == "residual-gen":
        return ResidualGenerator(image_shape, base_channels)
    if arch == "unet-gen":
        return UNetGenerator(image_shape, base_channels)
    raise GeneratorError(
        f"unknown generator {arch!r}; expected one of {GENERATOR_ARCHITECTURES}"
    )


def raw_perturbation(generator: nn.Module, noise: torch.Tensor) -> torch.Tensor:
    """Differentiable generator output for a [C, H, W] noise image."""
    if noise.ndim != 3:
        raise GeneratorError(f"noise must be [C, H, W], got {tuple(noise.shape)}")
    out = generator(noise.unsqueeze(0))[0]
    if out.shape != noise.shape:
        raise GeneratorError(
            f"generator broke the image-to-image contract: {tuple(out.shape)}"
        )
    return out


def generate_perturbation(generator: nn.Module, noise: torch.Tensor, p, zeta: float) -> Perturbation:
    """Run the generator and project onto the zeta ball; returns the artifact.

    The raw output passes through unchanged when already inside the ball,
    otherwise it is scaled so the p-norm equals zeta exactly (up to float
    rounding, guarded against overshoot).
    """
    p = _check_p(p)
    with torch.no_grad():
        raw = raw_perturbation(generator, noise)
    values = project_to_ball(raw, p, zeta)
    return Perturbation(values, p, zeta, perturbation_norm(values, p))


def project_to_ball(values: torch.Tensor, p, zeta: float) -> torch.Tensor:
    """Non-graph projection with a float64 factor; never exceeds zeta + slack."""
    p = _check_p(p)
    values = values.detach()
    norm = perturbation_norm(values, p)
    if norm == 0.0:
        warnings.warn("zero-norm perturbation; projection returns zeros")
        return values.clone()
    if norm <= zeta:
        return values.clone()
    out = values * (zeta / norm)
    overshoot = perturbation_norm(out, p)
    if overshoot > zeta:
        out = out * (zeta / overshoot)
    return out


def apply_perturbation(batch: ImageBatch, pert) -> ImageBatch:
    """x_hat = clamp(x + n_hat, 0, 1), one perturbation broadcast over the batch."""
    values = pert.values if isinstance(pert, Perturbation) else pert
    if values.ndim != 3 or values.shape != batch.pixels.shape[1:]:
        raise GeneratorError(
            f"perturbation shape {tuple(values.shape)} does not match "
            f"images {tuple(batch.pixels.shape[1:])}"
        )
    pixels = torch.clamp(batch.pixels + values.unsqueeze(0), 0.0, 1.0)
    return ImageBatch(pixels, batch.labels.clone())


def save_perturbation(
    pert: Perturbation,
    path: Path,
    *,
    generator_checkpoint: str | None = None,
    seed: int | None = None,
) -> Path:
    """Persist values as .npy plus a JSON sidecar with norm metadata."""
    path = Path(path)
    if path.suffix != ".npy":
        path = path.with_suffix(".npy")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, pert.values.detach().numpy().astype(np.float32))
    sidecar = {
        "p": "inf" if pert.norm_p == math.inf else 2,
        "zeta": pert.zeta,
        "achieved_norm": pert.achieved_norm,
        "generator_checkpoint": generator_checkpoint,
        "seed": seed,
    }
    atomic_write_json(path.with_suffix(".json"), sidecar)
    return path


def load_perturbation(path: Path) -> Perturbation:
    path = Path(path)
    values = torch.from_numpy(np.load(path))
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    p = math.inf if sidecar["p"] == "inf" else float(sidecar["p"])
    return Perturbation(values, p, float(sidecar["zeta"]), float(sidecar["achieved_norm"]))


def export_perturbation_png(pert: Perturbation, path: Path) -> float:
    """Write an amplified 8-bit view of the perturbation; returns the factor."""
    values = pert.values.detach().numpy()
    peak = float(np.abs(values).max())
    factor = 0.5 / peak if peak > 0 else 1.0
    img = np.clip(values * factor + 0.5, 0.0, 1.0)
    arr = (img.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return factor
