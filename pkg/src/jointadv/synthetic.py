"""In-repo synthetic shapes dataset: six texture-noised geometric classes.

Small enough to train a classifier in seconds, cluttered enough that
norm-bounded perturbations have something to bite on.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest

SHAPE_CLASSES = ("circle", "cross", "ring", "square", "stripes", "triangle")


def _coordinate_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = np.arange(size, dtype=np.float32)
    return np.meshgrid(ax, ax, indexing="ij")


def _smooth(mask: np.ndarray) -> np.ndarray:
    # one 3x3 box pass, cheap anti-aliasing
    padded = np.pad(mask, 1, mode="edge")
    acc = np.zeros_like(mask)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            acc += padded[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return acc / 9.0


def _shape_mask(class_name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _coordinate_grid(size)
    cy = size / 2 + rng.uniform(-0.15, 0.15) * size
    cx = size / 2 + rng.uniform(-0.15, 0.15) * size
    r = rng.uniform(0.18, 0.32) * size
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy * dy + dx * dx)

    if class_name == "circle":
        mask = dist <= r
    elif class_name == "square":
        mask = np.maximum(np.abs(dy), np.abs(dx)) <= r
    elif class_name == "ring":
        mask = (dist <= r) & (dist >= 0.55 * r)
    elif class_name == "cross":
        bar = rng.uniform(0.22, 0.34) * r
        mask = ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= bar) & (np.abs(dx) <= r)
        )
    elif class_name == "triangle":
        # upward triangle: below the two slanted edges, above the base
        mask = (dy <= r * 0.8) & (dy >= -0.8 * r + 1.6 * np.abs(dx))
    elif class_name == "stripes":
        angle = np.deg2rad(45.0 + rng.uniform(-15.0, 15.0))
        period = rng.uniform(4.0, 7.0)
        phase = (dx * np.cos(angle) + dy * np.sin(angle)) % period
        box = np.maximum(np.abs(dy), np.abs(dx)) <= r
        mask = box & (phase < period / 2)
    else:
        raise ValueError(f"unknown shape class {class_name!r}")
    return _smooth(mask.astype(np.float32))


def render_shape_image(class_name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one [H, W, 3] float32 image in [0, 1]."""
    bg = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
    fg = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
    while float(np.abs(fg - bg).max()) < 0.35:
        fg = rng.uniform(0.05, 0.95, size=3).astype(np.float32)

    yy, xx = _coordinate_grid(size)
    direction = rng.uniform(-1.0, 1.0, size=2)
    ramp = (direction[0] * yy + direction[1] * xx) / size
    ramp = (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-6) - 0.5

    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = bg
    img += rng.uniform(-0.10, 0.10) * ramp[:, :, None]
    img += rng.normal(0.0, 0.05, size=img.shape).astype(np.float32)

    mask = _shape_mask(class_name, size, rng)[:, :, None]
    img = img * (1.0 - mask) + fg * mask
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32) * mask
    return np.clip(img, 0.0, 1.0)


def generate_shapes_dataset(
    root: Path,
    per_class: int = 150,
    image_size: int = 32,
    seed: int = 0,
    classes: tuple[str, ...] = SHAPE_CLASSES,
    train_fraction: float = 0.8,
    test_fraction: float = 0.2,
) -> DatasetManifest:
    """Write the shapes dataset to ``root`` and return its manifest.

    Idempotent for a fixed seed: re-rendering produces identical files. A
    ``manifest.yaml`` is written next to the class directories.
    """
    root = Path(root)
    for class_index, class_name in enumerate(classes):
        cdir = root / class_name
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(class_index, i))
            )
            img = render_shape_image(class_name, image_size, rng)
            out = (img * 255.0).round().astype(np.uint8)
            Image.fromarray(out).save(cdir / f"{class_name}_{i:04d}.png")
    manifest = DatasetManifest(
        name="synthetic-shapes",
        root_path=root,
        num_classes=len(classes),
        image_size=(image_size, image_size),
        train_fraction=train_fraction,
        test_fraction=test_fraction,
        seed=seed,
    )
    manifest.to_yaml(root / "manifest.yaml")
    return manifest
