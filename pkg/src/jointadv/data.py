"""Dataset loading, deterministic splits, augmentation, and batch schedules.

Images live on disk in a directory-per-class layout and are loaded whole into
memory (desk scale). The canonical pixel range is [0, 1]; every norm budget in
the toolkit is expressed in that range.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image, UnidentifiedImageError

from .utils import atomic_write_text, derive_seed

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class DataError(ValueError):
    """Manifest, layout, or image-decoding problem."""


@dataclass(frozen=True)
class DatasetManifest:
    """Declarative description of an on-disk dataset.

    ``root_path`` points at a directory with one subdirectory per class
    (sorted subdirectory names define the label order 0..k-1).
    """

    name: str
    root_path: Path
    num_classes: int
    image_size: tuple[int, int]
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "root_path", Path(self.root_path))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise DataError(f"bad image_size {self.image_size}")
        for frac_name in ("train_fraction", "test_fraction"):
            frac = getattr(self, frac_name)
            if not (0.0 < frac <= 1.0):
                raise DataError(f"{frac_name} must be in (0, 1], got {frac}")
        if self.train_fraction + self.test_fraction > 1.0 + 1e-9:
            raise DataError(
                "split fractions exceed 1.0: "
                f"{self.train_fraction} + {self.test_fraction}"
            )

    def to_yaml(self, path: Path) -> None:
        doc = {
            "name": self.name,
            "root_path": str(self.root_path),
            "num_classes": self.num_classes,
            "image_size": list(self.image_size),
            "split": {"train": self.train_fraction, "test": self.test_fraction},
            "seed": self.seed,
        }
        atomic_write_text(path, yaml.safe_dump(doc, sort_keys=False))

    @classmethod
    def from_yaml(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}")
        if not isinstance(doc, dict):
            raise DataError(f"manifest is not a mapping: {path}")
        try:
            root = Path(doc["root_path"])
            if not root.is_absolute():
                root = (path.parent / root).resolve()
            split = doc.get("split", {})
            return cls(
                name=doc["name"],
                root_path=root,
                num_classes=int(doc["num_classes"]),
                image_size=tuple(doc["image_size"]),
                train_fraction=float(split.get("train", 0.8)),
                test_fraction=float(split.get("test", 0.2)),
                seed=int(doc.get("seed", 0)),
            )
        except KeyError as exc:
            raise DataError(f"manifest {path} missing field {exc}")


@dataclass
class ImageBatch:
    """A batch of images with labels; pixels [N, C, H, W] float32 in [0, 1]."""

    pixels: torch.Tensor
    labels: torch.Tensor

    def validate(self) -> "ImageBatch":
        if self.pixels.ndim != 4:
            raise DataError(f"pixels must be [N, C, H, W], got {tuple(self.pixels.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise DataError("labels must be a vector aligned with pixels")
        if self.pixels.numel() and (
            float(self.pixels.min()) < 0.0 or float(self.pixels.max()) > 1.0
        ):
            raise DataError("pixel values outside [0, 1]")
        return self

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class AugmentConfig:
    """Random-crop (with reflect padding) and horizontal-flip settings."""

    random_crop: bool = False
    crop_padding: int = 2
    horizontal_flip: bool = False
    flip_prob: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.flip_prob <= 1.0):
            raise DataError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.crop_padding < 0:
            raise DataError("crop_padding must be >= 0")

    @property
    def enabled(self) -> bool:
        return self.random_crop or self.horizontal_flip


@dataclass
class Split:
    """Fully materialized dataset split.

    ``indices`` are positions in the global (class-major, name-sorted) file
    list; they are what gets persisted for reproducibility audits.
    """

    pixels: torch.Tensor
    labels: torch.Tensor
    indices: torch.Tensor
    class_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def batch(self) -> ImageBatch:
        return ImageBatch(self.pixels, self.labels)

    def subset(self, positions) -> "Split":
        sel = torch.as_tensor(positions, dtype=torch.long)
        return Split(self.pixels[sel], self.labels[sel], self.indices[sel], self.class_names)


def _decode_image(path: Path, image_size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (image_size[1], image_size[0]):
                img = img.resize((image_size[1], image_size[0]), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}")
    return arr.transpose(2, 0, 1)


def load_dataset(manifest: DatasetManifest) -> tuple[Split, Split]:
    """Load a directory-per-class dataset and split it deterministically.

    The split is stratified per class with the manifest seed; train and test
    index sets are disjoint by construction. Every image is decoded to float32
    RGB in [0, 1] at the manifest image size.
    """
    root = manifest.root_path
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if len(class_dirs) != manifest.num_classes:
        raise DataError(
            f"{root}: found {len(class_dirs)} class directories, "
            f"manifest declares {manifest.num_classes}"
        )

    files: list[Path] = []
    labels: list[int] = []
    per_class: list[list[int]] = []
    for label, cdir in enumerate(class_dirs):
        members = sorted(
            p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not members:
            raise DataError(f"class directory has no images: {cdir}")
        per_class.append(list(range(len(files), len(files) + len(members))))
        files.extend(members)
        labels.extend([label] * len(members))

    pixels = torch.from_numpy(
        np.stack([_decode_image(p, manifest.image_size) for p in files])
    )
    labels_t = torch.tensor(labels, dtype=torch.long)

    rng = np.random.default_rng(manifest.seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for members in per_class:
        order = rng.permutation(len(members))
        n_train = int(np.floor(manifest.train_fraction * len(members)))
        n_test = int(np.floor(manifest.test_fraction * len(members)))
        if n_train < 1 or n_test < 1:
            raise DataError(
                f"split fractions leave an empty split for a class of {len(members)} images"
            )
        chosen = [members[i] for i in order]
        train_idx.extend(chosen[:n_train])
        test_idx.extend(chosen[n_train : n_train + n_test])

    class_names = tuple(d.name for d in class_dirs)

    def build(idx: list[int]) -> Split:
        sel = torch.tensor(sorted(idx), dtype=torch.long)
        return Split(pixels[sel], labels_t[sel], sel, class_names)

    return build(train_idx), build(test_idx)


def save_split_indices(path: Path, train: Split, test: Split) -> None:
    doc = {
        "train": [int(i) for i in train.indices],
        "test": [int(i) for i in test.indices],
    }
    atomic_write_text(path, json.dumps(doc) + "\n")


def augment(batch: ImageBatch, cfg: AugmentConfig, seed: int) -> ImageBatch:
    """Apply random crop / horizontal flip; identity when both are disabled.

    Deterministic in (batch, cfg, seed); preserves shape and the [0, 1] range.
    """
    batch.validate()
    pixels = batch.pixels.clone()
    labels = batch.labels.clone()
    if not cfg.enabled or len(batch) == 0:
        return ImageBatch(pixels, labels)

    rng = np.random.default_rng(seed)
    n, _, h, w = pixels.shape
    if cfg.random_crop and cfg.crop_padding > 0:
        pad = cfg.crop_padding
        padded = torch.nn.functional.pad(pixels, (pad, pad, pad, pad), mode="reflect")
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        out = torch.empty_like(pixels)
        for i in range(n):
            dy, dx = int(offs[i, 0]), int(offs[i, 1])
            out[i] = padded[i, :, dy : dy + h, dx : dx + w]
        pixels = out
    if cfg.horizontal_flip:
        flips = rng.random(n) < cfg.flip_prob
        if flips.any():
            sel = torch.from_numpy(np.nonzero(flips)[0])
            pixels[sel] = torch.flip(pixels[sel], dims=(-1,))
    return ImageBatch(pixels, labels)


def batches_per_epoch(split: Split, batch_size: int) -> int:
    b = min(batch_size, len(split))
    return max(1, len(split) // b)


def batch_for_iteration(
    split: Split, batch_size: int, seed: int, iteration: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pure function (split, batch_size, seed, iteration) -> (pixels, labels, indices).

    Batches cycle through seeded per-epoch permutations, so any iteration can
    be recomputed without replaying earlier ones; this is what makes attack
    runs resumable and independent of worker count.
    """
    n = len(split)
    b = min(batch_size, n)
    per_epoch = max(1, n // b)
    epoch, pos = divmod(int(iteration), per_epoch)
    order = np.random.default_rng(derive_seed(seed, "epoch", epoch)).permutation(n)
    sel = torch.from_numpy(order[pos * b : pos * b + b].copy())
    return split.pixels[sel], split.labels[sel], split.indices[sel]
