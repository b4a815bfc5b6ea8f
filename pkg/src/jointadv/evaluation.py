"""Attack metrics, reports, the detection-gap experiment, and map rendering.

Fooling ratio compares adversarial predictions against the model's *benign*
predictions, not ground truth. Map discrepancy is the per-pixel mean absolute
difference between max-normalized attribution maps; mask overlap is IOU of
binarized maps. The detection-gap experiment quantifies how separable an
adversarial set is from a matched-norm random-noise control using only the
per-image map discrepancy as the detector score.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch import nn

from .classifiers import activation_mode
from .data import Split
from .generators import Perturbation, perturbation_norm, project_to_ball
from .interpreters import (
    INTERPRETER_TAGS,
    RTSModel,
    attribution_values,
    binarize,
    resolve_classes,
)
from .utils import atomic_write_text, derive_seed


class EvaluationError(ValueError):
    """Bad inputs to a metric or report."""


@dataclass
class EvalReport:
    """Aggregate and per-image attack metrics for one (attack, model, interpreter)."""

    attack_id: str
    classifier_id: str
    interpreter_tag: str
    fooling_ratio: float
    l1_mean: float
    iou_mean: float
    per_image: list[dict]
    config: dict = field(default_factory=dict)
    seed: int = 0
    fooled_only: bool = False

    def __post_init__(self):
        if not (0.0 <= self.fooling_ratio <= 1.0):
            raise EvaluationError(f"fooling ratio outside [0, 1]: {self.fooling_ratio}")
        if not (0.0 <= self.iou_mean <= 1.0):
            raise EvaluationError(f"IOU outside [0, 1]: {self.iou_mean}")
        if self.l1_mean < 0.0:
            raise EvaluationError(f"negative L1: {self.l1_mean}")

    def to_json(self, path: Path | None = None) -> dict:
        doc = asdict(self)
        if path is not None:
            atomic_write_text(Path(path), json.dumps(doc, indent=2) + "\n")
        return doc

    @classmethod
    def from_json(cls, source) -> "EvalReport":
        if isinstance(source, (str, Path)):
            source = json.loads(Path(source).read_text(encoding="utf-8"))
        return cls(**source)


def _as_values(maps) -> torch.Tensor:
    values = maps.values if hasattr(maps, "values") and isinstance(maps.values, torch.Tensor) else maps
    if values.ndim == 2:
        values = values.unsqueeze(0)
    return values


def l1_discrepancy(map_benign, map_adv) -> float:
    """Per-pixel mean |I(x_adv) - I(x)|, averaged over images."""
    a = _as_values(map_benign)
    b = _as_values(map_adv)
    if a.shape != b.shape:
        raise EvaluationError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float((a - b).abs().flatten(1).mean(dim=1).mean())


def l1_discrepancy_per_image(map_benign, map_adv) -> torch.Tensor:
    a = _as_values(map_benign)
    b = _as_values(map_adv)
    if a.shape != b.shape:
        raise EvaluationError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().flatten(1).mean(dim=1)


def iou_per_image(mask_benign: torch.Tensor, mask_adv: torch.Tensor) -> torch.Tensor:
    a = _as_values(mask_benign).bool()
    b = _as_values(mask_adv).bool()
    if a.shape != b.shape:
        raise EvaluationError(f"mask shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    inter = (a & b).flatten(1).sum(dim=1).double()
    union = (a | b).flatten(1).sum(dim=1).double()
    # empty vs empty counts as identical
    return torch.where(union > 0, inter / union.clamp_min(1), torch.ones_like(inter))


def iou_score(mask_benign, mask_adv) -> float:
    """|A intersect B| / |A union B| over binary masks; 1.0 when both empty."""
    return float(iou_per_image(mask_benign, mask_adv).mean())


def _adv_pixels(pixels: torch.Tensor, pert) -> torch.Tensor:
    if isinstance(pert, Perturbation):
        values = pert.values.unsqueeze(0)
    else:
        values = torch.as_tensor(pert)
        if values.ndim == 3:
            values = values.unsqueeze(0)
        elif values.shape[0] != pixels.shape[0]:
            raise EvaluationError(
                "per-image perturbations must align with the evaluated images"
            )
    return torch.clamp(pixels + values, 0.0, 1.0)


def _require_standard_eval(model: nn.Module) -> None:
    if activation_mode(model) != "standard-relu":
        raise EvaluationError("evaluation requires the classifier in standard-relu mode")
    model.eval()


def fooling_ratio(classifier: nn.Module, pixels: torch.Tensor, pert, batch_size: int = 256) -> float:
    """Fraction of images whose predicted label changes under the perturbation."""
    if pixels.shape[0] == 0:
        raise EvaluationError("cannot evaluate an empty set")
    _require_standard_eval(classifier)
    changed = 0
    with torch.no_grad():
        for start in range(0, pixels.shape[0], batch_size):
            chunk = pixels[start : start + batch_size]
            if isinstance(pert, Perturbation) or torch.as_tensor(pert).ndim == 3:
                sub = pert
            else:
                sub = torch.as_tensor(pert)[start : start + batch_size]
            benign = classifier(chunk).argmax(dim=1)
            adv = classifier(_adv_pixels(chunk, sub)).argmax(dim=1)
            changed += int((benign != adv).sum())
    return changed / pixels.shape[0]


def evaluate_attack(
    classifier: nn.Module,
    interpreter_tag: str,
    test_split: Split,
    pert,
    *,
    rts: RTSModel | None = None,
    attack_id: str = "attack",
    classifier_id: str = "classifier",
    seed: int = 0,
    batch_size: int = 64,
    binarize_rule: str = "top-fraction",
    binarize_fraction: float = 0.2,
    fooled_only: bool = False,
    config: dict | None = None,
    max_images: int | None = None,
) -> EvalReport:
    """Full-split FR / L1 / IOU with per-image records.

    Attribution maps for benign and adversarial inputs are both computed for
    the class the classifier predicts on the *benign* image, so the metrics
    measure map drift rather than class-switch artifacts.
    """
    if interpreter_tag not in INTERPRETER_TAGS:
        raise EvaluationError(f"unknown interpreter {interpreter_tag!r}")
    if interpreter_tag == "rts" and rts is None:
        raise EvaluationError("RTS evaluation requires the trained RTS model")
    _require_standard_eval(classifier)

    n_total = len(test_split) if max_images is None else min(max_images, len(test_split))
    if n_total == 0:
        raise EvaluationError("cannot evaluate an empty split")
    per_image: list[dict] = []
    for start in range(0, n_total, batch_size):
        stop = min(start + batch_size, n_total)
        chunk = test_split.pixels[start:stop]
        if isinstance(pert, Perturbation) or torch.as_tensor(pert).ndim == 3:
            sub = pert
        else:
            sub = torch.as_tensor(pert)[start:stop]
        adv = _adv_pixels(chunk, sub)
        with torch.no_grad():
            benign_pred = classifier(chunk).argmax(dim=1)
            adv_pred = classifier(adv).argmax(dim=1)
        map_benign = attribution_values(interpreter_tag, classifier, chunk, benign_pred, rts=rts).detach()
        map_adv = attribution_values(interpreter_tag, classifier, adv, benign_pred, rts=rts).detach()
        l1 = l1_discrepancy_per_image(map_benign, map_adv)
        iou = iou_per_image(
            binarize(map_benign, rule=binarize_rule, fraction=binarize_fraction),
            binarize(map_adv, rule=binarize_rule, fraction=binarize_fraction),
        )
        for j in range(stop - start):
            per_image.append(
                {
                    "index": int(test_split.indices[start + j]),
                    "benign_pred": int(benign_pred[j]),
                    "adv_pred": int(adv_pred[j]),
                    "fooled": bool(benign_pred[j] != adv_pred[j]),
                    "l1": float(l1[j]),
                    "iou": float(iou[j]),
                }
            )

    fr = sum(r["fooled"] for r in per_image) / len(per_image)
    pool = [r for r in per_image if r["fooled"]] if fooled_only else per_image
    if fooled_only and not pool:
        l1_mean, iou_mean = 0.0, 1.0
    else:
        l1_mean = sum(r["l1"] for r in pool) / len(pool)
        iou_mean = sum(r["iou"] for r in pool) / len(pool)
    return EvalReport(
        attack_id=attack_id,
        classifier_id=classifier_id,
        interpreter_tag=interpreter_tag,
        fooling_ratio=fr,
        l1_mean=l1_mean,
        iou_mean=iou_mean,
        per_image=per_image,
        config=config or {},
        seed=seed,
        fooled_only=fooled_only,
    )


def auc_threshold_detector(benign_scores, adversarial_scores) -> float:
    """Mann-Whitney AUC of 'flag as adversarial when score exceeds threshold'.

    Ties contribute half credit, so exchangeable samples give 0.5.
    """
    a = np.asarray(benign_scores, dtype=np.float64)
    b = np.asarray(adversarial_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EvaluationError("both score samples must be nonempty")
    greater = (b[:, None] > a[None, :]).sum()
    equal = (b[:, None] == a[None, :]).sum()
    return float((greater + 0.5 * equal) / (a.size * b.size))


def matched_norm_noise(shape: tuple[int, ...], p, zeta: float, seed: int) -> torch.Tensor:
    """Uniform sign-symmetric noise scaled to exactly the attack budget."""
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.rand(shape, generator=gen) * 2.0 - 1.0
    norm = perturbation_norm(noise, p)
    return noise * (zeta / norm)


@dataclass
class DetectionGapResult:
    rows: list[dict]
    control_scores: list[float]

    def to_csv(self, path: Path) -> None:
        write_csv(path, ["set", "mean_l1", "std_l1", "mean_iou", "auc"], self.rows)


def detection_gap_experiment(
    classifier: nn.Module,
    interpreter_tag: str,
    benign_pixels: torch.Tensor,
    adversarial_sets: dict[str, object],
    *,
    p,
    zeta: float,
    rts: RTSModel | None = None,
    control_seed: int = 0,
    binarize_fraction: float = 0.2,
    batch_size: int = 64,
) -> DetectionGapResult:
    """Score each adversarial set against a matched-norm random-noise control.

    For every image the detector score is the L1 discrepancy between the
    benign attribution map and the map of the (perturbed) input. The control
    perturbs the same images with random noise of the same norm budget, which
    pins down what 'benign-looking' discrepancy means at this perturbation
    strength. AUC >> 0.5 means a simple threshold separates the attack from
    harmless noise; AUC near 0.5 means the attack hides.
    """
    if not adversarial_sets:
        raise EvaluationError("need at least one adversarial set")
    _require_standard_eval(classifier)
    n = benign_pixels.shape[0]

    def scores_for(perturbed: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        l1s: list[torch.Tensor] = []
        ious: list[torch.Tensor] = []
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            chunk = benign_pixels[start:stop]
            adv = perturbed[start:stop]
            with torch.no_grad():
                classes = classifier(chunk).argmax(dim=1)
            mb = attribution_values(interpreter_tag, classifier, chunk, classes, rts=rts).detach()
            ma = attribution_values(interpreter_tag, classifier, adv, classes, rts=rts).detach()
            l1s.append(l1_discrepancy_per_image(mb, ma))
            ious.append(
                iou_per_image(
                    binarize(mb, fraction=binarize_fraction),
                    binarize(ma, fraction=binarize_fraction),
                )
            )
        return torch.cat(l1s).numpy(), torch.cat(ious).numpy()

    def materialize(entry) -> torch.Tensor:
        if isinstance(entry, Perturbation):
            return torch.clamp(benign_pixels + entry.values.unsqueeze(0), 0, 1)
        values = torch.as_tensor(entry)
        if values.ndim == 3:
            return torch.clamp(benign_pixels + values.unsqueeze(0), 0, 1)
        if values.shape == benign_pixels.shape:
            # already-perturbed pixels or per-image perturbations
            if float(values.min()) >= 0.0 and float(values.max()) <= 1.0:
                return values
            return torch.clamp(benign_pixels + values, 0, 1)
        raise EvaluationError("adversarial set entry has an incompatible shape")

    control = torch.clamp(
        benign_pixels
        + torch.stack(
            [
                matched_norm_noise(benign_pixels.shape[1:], p, zeta, derive_seed(control_seed, "ctl", i))
                for i in range(n)
            ]
        ),
        0,
        1,
    )
    control_l1, _ = scores_for(control)

    rows = []
    for name, entry in adversarial_sets.items():
        l1, iou = scores_for(materialize(entry))
        rows.append(
            {
                "set": name,
                "mean_l1": float(l1.mean()),
                "std_l1": float(l1.std()),
                "mean_iou": float(iou.mean()),
                "auc": auc_threshold_detector(control_l1, l1),
            }
        )
    return DetectionGapResult(rows=rows, control_scores=[float(v) for v in control_l1])


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


def write_fooling_table(path: Path, rows: list[dict]) -> None:
    """Rows shaped {method, dataset, model, FR}."""
    write_csv(path, ["method", "dataset", "model", "FR"], rows)


def write_discrepancy_table(path: Path, rows: list[dict]) -> None:
    """Rows shaped {method, dataset, model, L1, IOU}."""
    write_csv(path, ["method", "dataset", "model", "L1", "IOU"], rows)


_HEAT_STOPS = np.array(
    [[0.0, 0.0, 0.5], [0.0, 0.5, 1.0], [0.5, 1.0, 0.5], [1.0, 0.5, 0.0], [0.8, 0.0, 0.0]],
    dtype=np.float64,
)


def _heat_rgb(values: np.ndarray) -> np.ndarray:
    v = np.clip(values, 0.0, 1.0) * (len(_HEAT_STOPS) - 1)
    low = np.floor(v).astype(int)
    high = np.minimum(low + 1, len(_HEAT_STOPS) - 1)
    frac = (v - low)[..., None]
    return _HEAT_STOPS[low] * (1 - frac) + _HEAT_STOPS[high] * frac


def render_attribution_grid(
    images: torch.Tensor,
    maps_per_method: dict[str, torch.Tensor],
    out_path: Path,
    *,
    tile_scale: int = 3,
    overlay_alpha: float = 0.55,
    label_width: int = 84,
) -> Path:
    """Write a deterministic PNG grid: one row per method, one column per image.

    Map values are rendered as a heat overlay on the corresponding image.
    Raises before writing anything when the inputs are inconsistent.
    """
    if not maps_per_method:
        raise EvaluationError("no methods to render")
    n = images.shape[0]
    if n == 0:
        raise EvaluationError("no images to render")
    for name, maps in maps_per_method.items():
        if _as_values(maps).shape[0] != n:
            raise EvaluationError(f"method {name!r} has a mismatched image count")

    h, w = images.shape[-2:]
    th, tw = h * tile_scale, w * tile_scale
    pad = 2
    grid_w = label_width + n * (tw + pad) + pad
    grid_h = len(maps_per_method) * (th + pad) + pad
    canvas = Image.new("RGB", (grid_w, grid_h), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)

    base = images.detach().numpy().transpose(0, 2, 3, 1)
    for row, (name, maps) in enumerate(maps_per_method.items()):
        values = _as_values(maps).detach().numpy()
        y0 = pad + row * (th + pad)
        draw.text((4, y0 + th // 2 - 5), name, fill=(0, 0, 0))
        for col in range(n):
            heat = _heat_rgb(values[col])
            tile = (1 - overlay_alpha) * base[col] + overlay_alpha * heat
            tile8 = (np.clip(tile, 0, 1) * 255).round().astype(np.uint8)
            img = Image.fromarray(tile8).resize((tw, th), Image.NEAREST)
            canvas.paste(img, (label_width + pad + col * (tw + pad), y0))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path, format="PNG")
    return out_path


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
