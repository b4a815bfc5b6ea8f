"""Joint attack objectives, the universal/per-image training loops, and baselines.

The joint objective is max(L_cls, delta) + lam * L_int: while the classifier
term sits above the floor delta both goals are optimized together; once
fooling is good enough the floor zeroes the classifier gradient and the
optimizer focuses on keeping attribution maps unchanged. lam = 0 degenerates
to a plain generative universal perturbation and doubles as the built-in
ablation baseline.
"""
from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .classifiers import activation_mode, set_activation_mode
from .data import AugmentConfig, ImageBatch, Split, augment, batch_for_iteration
from .generators import (
    Perturbation,
    build_generator,
    generate_perturbation,
    perturbation_norm,
    project_to_ball,
    raw_perturbation,
    sample_noise,
    scale_to_norm_ball,
)
from .interpreters import INTERPRETER_TAGS, RTSModel, attribution_values
from .utils import atomic_torch_save, atomic_write_text, derive_seed

OBJECTIVES = ("maximize-ce", "least-likely", "targeted")
LAM_RECOMMENDED = (0.0001, 0.003)
_CE_FLOOR = 1e-12


class AttackConfigError(ValueError):
    """Invalid attack configuration."""


class NumericalError(RuntimeError):
    """Attack optimization produced a non-finite loss."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class AttackConfig:
    """Everything one attack run needs; seeds every stochastic sub-stream."""

    objective: str = "least-likely"
    interpreter: str = "gradcam"
    lam: float = 0.002  # weight of the map-preservation term; 0 = ablation baseline
    delta: float = -0.8  # floor on the classifier term of the joint objective
    norm_p: float = math.inf
    zeta: float | None = None  # None resolves to the default budget for the image shape
    tau: float = 1e-4
    iterations: int = 400
    learning_rate: float = 2e-4
    batch_size: int = 30
    seed: int = 0
    target_class: int | None = None
    rts_encoder_loss: bool = True
    generator_arch: str = "residual-gen"
    generator_channels: int = 16
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise AttackConfigError(f"unknown objective {self.objective!r}")
        if self.interpreter not in INTERPRETER_TAGS:
            raise AttackConfigError(f"unknown interpreter {self.interpreter!r}")
        if self.lam < 0:
            raise AttackConfigError("lam must be >= 0")
        if self.lam > 0 and not (LAM_RECOMMENDED[0] <= self.lam <= LAM_RECOMMENDED[1]):
            warnings.warn(
                f"lam={self.lam} is outside the recommended range {LAM_RECOMMENDED}"
            )
        if self.iterations < 1:
            raise AttackConfigError("iterations must be >= 1")
        if self.objective == "targeted" and self.target_class is None:
            raise AttackConfigError("targeted objective requires target_class")
        if self.tau <= 0:
            raise AttackConfigError("tau must be > 0")

    def validate_against(self, num_classes: int) -> None:
        if self.objective == "targeted" and not (0 <= self.target_class < num_classes):
            raise AttackConfigError(
                f"target_class {self.target_class} outside 0..{num_classes - 1}"
            )

    def resolve_zeta(self, image_shape: tuple[int, int, int]) -> float:
        from .generators import default_zeta

        return self.zeta if self.zeta is not None else default_zeta(self.norm_p, image_shape)


@dataclass
class IterationRecord:
    iteration: int
    loss_classifier: float
    loss_interpreter: float | None
    loss_joint: float
    gate_active: bool
    perturbation_norm: float

    def to_json(self) -> dict:
        return {
            "iter": self.iteration,
            "l_cls": self.loss_classifier,
            "l_int": self.loss_interpreter,
            "l_joint": self.loss_joint,
            "gate_active": self.gate_active,
            "norm": self.perturbation_norm,
        }


@dataclass
class AttackRunRecord:
    """Per-iteration loss history plus run-level metadata."""

    iterations: list[IterationRecord] = field(default_factory=list)
    gradient_probes: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def append(self, rec: IterationRecord) -> None:
        self.iterations.append(rec)

    def write_jsonl(self, path: Path) -> None:
        lines = "".join(json.dumps(r.to_json()) + "\n" for r in self.iterations)
        atomic_write_text(path, lines)

    @staticmethod
    def read_jsonl(path: Path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def classifier_loss(
    kind: str,
    logits: torch.Tensor,
    labels: torch.Tensor | None = None,
    least_likely: torch.Tensor | None = None,
    target_class: int | None = None,
) -> torch.Tensor:
    """Classifier-attack loss, a mean of per-image terms.

    maximize-ce: -log(CE(logits, true labels)); least-likely: log(CE toward
    the per-image least likely class, precomputed from benign logits);
    targeted: log(CE toward the fixed target). Cross entropies are floored to
    keep the outer log finite.
    """
    if kind == "maximize-ce":
        if labels is None:
            raise AttackConfigError("maximize-ce needs true labels")
        ce = F.cross_entropy(logits, labels, reduction="none").clamp_min(_CE_FLOOR)
        return (-torch.log(ce)).mean()
    if kind == "least-likely":
        if least_likely is None:
            raise AttackConfigError("least-likely needs the benign least-likely classes")
        ce = F.cross_entropy(logits, least_likely, reduction="none").clamp_min(_CE_FLOOR)
        return torch.log(ce).mean()
    if kind == "targeted":
        if target_class is None:
            raise AttackConfigError("targeted needs target_class")
        targets = torch.full((logits.shape[0],), int(target_class), dtype=torch.long)
        ce = F.cross_entropy(logits, targets, reduction="none").clamp_min(_CE_FLOOR)
        return torch.log(ce).mean()
    raise AttackConfigError(f"unknown objective {kind!r}")


def interpreter_loss(map_adv: torch.Tensor, map_benign: torch.Tensor) -> torch.Tensor:
    """Mean per-image L2 distance between attribution maps."""
    if map_adv.shape != map_benign.shape:
        raise AttackConfigError(
            f"map shapes differ: {tuple(map_adv.shape)} vs {tuple(map_benign.shape)}"
        )
    diff = (map_adv - map_benign).flatten(1)
    return torch.linalg.vector_norm(diff, 2, dim=1).mean()


def rts_encoder_loss(latent_adv: torch.Tensor, latent_benign: torch.Tensor) -> torch.Tensor:
    """Mean per-image L2 distance between RTS encoder embeddings."""
    diff = (latent_adv - latent_benign).flatten(1)
    return torch.linalg.vector_norm(diff, 2, dim=1).mean()


def joint_loss(l_cls: torch.Tensor, l_int, lam: float, delta: float) -> torch.Tensor:
    """max(L_cls, delta) + lam * L_int; the floor zeroes the classifier gradient."""
    gated = torch.clamp_min(l_cls, delta) if isinstance(l_cls, torch.Tensor) else max(l_cls, delta)
    if l_int is None:
        return gated
    return gated + lam * l_int


def _benign_least_likely(classifier: nn.Module, split: Split, batch_size: int = 256) -> dict[int, int]:
    """argmin of benign logits per dataset index, frozen for the whole run."""
    out: dict[int, int] = {}
    classifier.eval()
    with torch.no_grad():
        for start in range(0, len(split), batch_size):
            px = split.pixels[start : start + batch_size]
            idx = split.indices[start : start + batch_size]
            mins = classifier(px).argmin(dim=1)
            for i, m in zip(idx.tolist(), mins.tolist()):
                out[i] = m
    return out


def _interpreter_terms(
    cfg: AttackConfig,
    classifier: nn.Module,
    rts: RTSModel | None,
    x: torch.Tensor,
    x_adv: torch.Tensor,
    classes: torch.Tensor,
) -> torch.Tensor:
    with torch.no_grad():
        map_benign = attribution_values(cfg.interpreter, classifier, x, classes, rts=rts)
    map_adv = attribution_values(
        cfg.interpreter,
        classifier,
        x_adv,
        classes,
        rts=rts,
        create_graph=(cfg.interpreter == "gradcam"),
    )
    loss = interpreter_loss(map_adv, map_benign.detach())
    if cfg.interpreter == "rts" and cfg.rts_encoder_loss:
        with torch.no_grad():
            latent_benign = rts.encoder(x)
        loss = loss + rts_encoder_loss(rts.encoder(x_adv), latent_benign.detach())
    return loss


def _freeze(model: nn.Module) -> None:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)


def train_juap(
    generator: nn.Module,
    classifier: nn.Module,
    train_split: Split,
    cfg: AttackConfig,
    *,
    rts: RTSModel | None = None,
    record_path: Path | None = None,
    state_path: Path | None = None,
    resume: bool = False,
    probe_every: int = 0,
) -> tuple[nn.Module, Perturbation, AttackRunRecord]:
    """Optimize the generator so one noise-derived perturbation fools the
    classifier on the training stream while its attribution maps stay put.

    The noise image is sampled once per run and held fixed, making the run a
    deterministic optimization over the generator parameters. The classifier
    (and RTS, when used) stays frozen; with the GradCAM interpreter the
    classifier temporarily runs with the smoothed backward gate and is
    restored afterwards. ``state_path`` enables exact resume from the last
    checkpointed iteration.
    """
    cfg.validate_against(classifier.num_classes)
    if cfg.interpreter == "rts" and cfg.lam > 0 and rts is None:
        raise AttackConfigError("interpreter 'rts' requires a trained RTS model")
    image_shape = tuple(train_split.pixels.shape[1:])
    zeta = cfg.resolve_zeta(image_shape)

    _freeze(classifier)
    if rts is not None:
        _freeze(rts)
    previous_mode = activation_mode(classifier)
    if cfg.interpreter == "gradcam" and cfg.lam > 0:
        set_activation_mode(classifier, "smoothed-relu", tau=cfg.tau)

    noise = sample_noise(image_shape, derive_seed(cfg.seed, "attack-noise"))
    optimizer = torch.optim.Adam(generator.parameters(), lr=cfg.learning_rate)
    least_likely = (
        _benign_least_likely(classifier, train_split)
        if cfg.objective == "least-likely"
        else None
    )

    start_iter = 0
    record = AttackRunRecord(config=_config_snapshot(cfg, zeta))
    if resume and state_path is not None and Path(state_path).exists():
        state = torch.load(state_path, map_location="cpu", weights_only=False)
        generator.load_state_dict(state["generator"])
        optimizer.load_state_dict(state["optimizer"])
        start_iter = int(state["next_iteration"])
        record.iterations = [IterationRecord(**r) for r in state["records"]]

    started = time.monotonic()
    generator.train()
    try:
        for t in range(start_iter, cfg.iterations):
            px, labels, idx = batch_for_iteration(
                train_split, cfg.batch_size, derive_seed(cfg.seed, "attack-batches"), t
            )
            batch = augment(ImageBatch(px, labels), cfg.augment, derive_seed(cfg.seed, "attack-aug", t))
            x = batch.pixels

            n_hat = scale_to_norm_ball(raw_perturbation(generator, noise), cfg.norm_p, zeta)
            x_adv = torch.clamp(x + n_hat.unsqueeze(0), 0.0, 1.0)

            with torch.no_grad():
                benign_logits = classifier(x)
            classes = benign_logits.argmax(dim=1)
            l_cls = classifier_loss(
                cfg.objective,
                classifier(x_adv),
                labels=batch.labels,
                least_likely=(
                    torch.tensor([least_likely[int(i)] for i in idx], dtype=torch.long)
                    if least_likely is not None
                    else None
                ),
                target_class=cfg.target_class,
            )
            l_int = (
                _interpreter_terms(cfg, classifier, rts, x, x_adv, classes)
                if cfg.lam > 0
                else None
            )
            loss = joint_loss(l_cls, l_int, cfg.lam, cfg.delta)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite joint loss at iteration {t}", iteration=t)

            gate_active = bool(float(l_cls) < cfg.delta)
            if probe_every and t % probe_every == 0:
                record.gradient_probes.append(
                    _probe_gate_gradient(generator, l_cls, cfg.delta, t, gate_active)
                )

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            record.append(
                IterationRecord(
                    iteration=t,
                    loss_classifier=float(l_cls),
                    loss_interpreter=None if l_int is None else float(l_int),
                    loss_joint=float(loss),
                    gate_active=gate_active,
                    perturbation_norm=perturbation_norm(n_hat, cfg.norm_p),
                )
            )
            if state_path is not None and (t + 1) % cfg.checkpoint_every == 0:
                _save_attack_state(state_path, generator, optimizer, t + 1, record)
    finally:
        set_activation_mode(classifier, previous_mode)

    record.wall_clock = time.monotonic() - started
    generator.eval()
    perturbation = generate_perturbation(generator, noise, cfg.norm_p, zeta)
    if state_path is not None:
        _save_attack_state(state_path, generator, optimizer, cfg.iterations, record)
    if record_path is not None:
        record.write_jsonl(record_path)
    return generator, perturbation, record


def _config_snapshot(cfg: AttackConfig, zeta: float) -> dict:
    doc = asdict(cfg)
    doc["zeta_resolved"] = zeta
    doc["norm_p"] = "inf" if cfg.norm_p == math.inf else cfg.norm_p
    return doc


def _probe_gate_gradient(
    generator: nn.Module, l_cls: torch.Tensor, delta: float, iteration: int, gate_active: bool
) -> dict:
    """Gradient norm of the gated classifier term alone, for gate audits."""
    gated = torch.clamp_min(l_cls, delta)
    grads = torch.autograd.grad(
        gated, [p for p in generator.parameters()], retain_graph=True, allow_unused=True
    )
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(g.detach().pow(2).sum())
    return {
        "iter": iteration,
        "gate_active": gate_active,
        "classifier_grad_norm": math.sqrt(total),
    }


def _save_attack_state(path: Path, generator, optimizer, next_iteration: int, record: AttackRunRecord) -> None:
    atomic_torch_save(
        {
            "generator": generator.state_dict(),
            "optimizer": optimizer.state_dict(),
            "next_iteration": next_iteration,
            "records": [asdict(r) for r in record.iterations],
        },
        Path(path),
    )


def train_jap_per_image(
    classifier: nn.Module,
    image: torch.Tensor,
    cfg: AttackConfig,
    *,
    rts: RTSModel | None = None,
    label: int | None = None,
    generator_seed: int | None = None,
) -> tuple[Perturbation, AttackRunRecord]:
    """Per-image variant: a fresh generator is optimized for one image.

    Same objective and gate as the universal loop with a batch of one; the
    image itself is fixed (no augmentation), so every iteration refines the
    same perturbation.
    """
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise AttackConfigError("per-image attack expects a single image")
        image = image[0]
    if image.ndim != 3:
        raise AttackConfigError(f"image must be [C, H, W], got {tuple(image.shape)}")
    cfg.validate_against(classifier.num_classes)
    if cfg.interpreter == "rts" and cfg.lam > 0 and rts is None:
        raise AttackConfigError("interpreter 'rts' requires a trained RTS model")
    image_shape = tuple(image.shape)
    zeta = cfg.resolve_zeta(image_shape)

    _freeze(classifier)
    if rts is not None:
        _freeze(rts)
    previous_mode = activation_mode(classifier)
    if cfg.interpreter == "gradcam" and cfg.lam > 0:
        set_activation_mode(classifier, "smoothed-relu", tau=cfg.tau)

    generator = build_generator(
        cfg.generator_arch,
        image_shape,
        cfg.generator_channels,
        seed=cfg.seed if generator_seed is None else generator_seed,
    )
    noise = sample_noise(image_shape, derive_seed(cfg.seed, "attack-noise"))
    optimizer = torch.optim.Adam(generator.parameters(), lr=cfg.learning_rate)

    x = image.unsqueeze(0)
    with torch.no_grad():
        benign_logits = classifier(x)
    classes = benign_logits.argmax(dim=1)
    least_likely = benign_logits.argmin(dim=1)
    labels = torch.tensor([label], dtype=torch.long) if label is not None else None

    record = AttackRunRecord(config=_config_snapshot(cfg, zeta))
    started = time.monotonic()
    generator.train()
    try:
        for t in range(cfg.iterations):
            n_hat = scale_to_norm_ball(raw_perturbation(generator, noise), cfg.norm_p, zeta)
            x_adv = torch.clamp(x + n_hat.unsqueeze(0), 0.0, 1.0)
            l_cls = classifier_loss(
                cfg.objective,
                classifier(x_adv),
                labels=labels,
                least_likely=least_likely,
                target_class=cfg.target_class,
            )
            l_int = (
                _interpreter_terms(cfg, classifier, rts, x, x_adv, classes)
                if cfg.lam > 0
                else None
            )
            loss = joint_loss(l_cls, l_int, cfg.lam, cfg.delta)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite joint loss at iteration {t}", iteration=t)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            record.append(
                IterationRecord(
                    iteration=t,
                    loss_classifier=float(l_cls),
                    loss_interpreter=None if l_int is None else float(l_int),
                    loss_joint=float(loss),
                    gate_active=bool(float(l_cls) < cfg.delta),
                    perturbation_norm=perturbation_norm(n_hat, cfg.norm_p),
                )
            )
    finally:
        set_activation_mode(classifier, previous_mode)

    record.wall_clock = time.monotonic() - started
    generator.eval()
    perturbation = generate_perturbation(generator, noise, cfg.norm_p, zeta)
    return perturbation, record


def baseline_pgd(
    classifier: nn.Module,
    pixels: torch.Tensor,
    p,
    zeta: float,
    steps: int = 40,
    step_size: float | None = None,
) -> torch.Tensor:
    """Projected gradient ascent on cross entropy against the benign prediction.

    Accepts [C, H, W] or [N, C, H, W]; returns per-image perturbations of the
    same batch shape, each inside the zeta ball and box-feasible.
    """
    single = pixels.ndim == 3
    x = pixels.unsqueeze(0) if single else pixels
    p = float("inf") if p in (float("inf"), "inf") else float(p)
    if step_size is None:
        step_size = 2.5 * zeta / max(steps, 1)
    _freeze(classifier)
    with torch.no_grad():
        targets = classifier(x).argmax(dim=1)
    delta = torch.zeros_like(x)
    for _ in range(steps):
        delta.requires_grad_(True)
        loss = F.cross_entropy(classifier(torch.clamp(x + delta, 0, 1)), targets)
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            if p == float("inf"):
                delta = delta + step_size * grad.sign()
                delta = delta.clamp(-zeta, zeta)
            else:
                flat = grad.flatten(1)
                norms = torch.linalg.vector_norm(flat, 2, dim=1).clamp_min(1e-12)
                delta = delta + step_size * (grad / norms.view(-1, 1, 1, 1))
                dnorms = torch.linalg.vector_norm(delta.flatten(1), 2, dim=1)
                factor = torch.clamp(zeta / dnorms.clamp_min(1e-12), max=1.0)
                delta = delta * factor.view(-1, 1, 1, 1)
            delta = torch.clamp(x + delta, 0, 1) - x
        delta = delta.detach()
    return delta[0] if single else delta


def baseline_pgd_perturbation(
    classifier: nn.Module, image: torch.Tensor, p, zeta: float, steps: int = 40,
    step_size: float | None = None,
) -> Perturbation:
    """Single-image PGD wrapped in the perturbation artifact type."""
    values = baseline_pgd(classifier, image, p, zeta, steps, step_size)
    p_checked = float("inf") if p in (float("inf"), "inf") else float(p)
    return Perturbation(values, p_checked, zeta, perturbation_norm(values, p_checked))


def baseline_iterative_uap(
    classifier: nn.Module,
    train_split: Split,
    p,
    zeta: float,
    *,
    passes: int = 5,
    inner_steps: int = 10,
    inner_step_size: float | None = None,
    target_fooling: float = 0.8,
    sample_limit: int | None = 200,
    seed: int = 0,
) -> tuple[Perturbation, dict]:
    """Accumulative universal perturbation in the classic iterative style.

    Visits images one at a time; for each image the running perturbation does
    not yet fool, takes up to ``inner_steps`` normalized gradient steps toward
    the decision boundary, adds the successful step into the running
    perturbation, and re-projects onto the zeta ball. The inner solver is a
    plain gradient walk rather than a minimal-perturbation solver, which
    trades fidelity for simplicity. Returns best-effort with a convergence
    flag after ``passes`` sweeps.
    """
    p = float("inf") if p in (float("inf"), "inf") else float(p)
    if inner_step_size is None:
        inner_step_size = zeta / 4 if p == float("inf") else zeta / 2
    _freeze(classifier)
    n = len(train_split)
    limit = min(n, sample_limit) if sample_limit else n
    order = torch.from_numpy(np.random.default_rng(seed).permutation(n)[:limit].copy())
    pixels = train_split.pixels[order]
    with torch.no_grad():
        benign_pred = classifier(pixels).argmax(dim=1)

    uap = torch.zeros_like(pixels[0])
    fooling = 0.0
    converged = False
    for _ in range(passes):
        for i in range(limit):
            x = pixels[i : i + 1]
            with torch.no_grad():
                still_correct = int(
                    classifier(torch.clamp(x + uap, 0, 1)).argmax(dim=1)
                ) == int(benign_pred[i])
            if not still_correct:
                continue
            extra = torch.zeros_like(uap)
            for _ in range(inner_steps):
                probe = extra.clone().requires_grad_(True)
                adv = torch.clamp(x + uap + probe, 0, 1)
                loss = F.cross_entropy(classifier(adv), benign_pred[i : i + 1])
                (grad,) = torch.autograd.grad(loss, probe)
                with torch.no_grad():
                    if p == float("inf"):
                        step = inner_step_size * grad[0].sign()
                    else:
                        gnorm = torch.linalg.vector_norm(grad.flatten()).clamp_min(1e-12)
                        step = inner_step_size * grad[0] / gnorm
                    extra = extra + step
                    fooled = int(
                        classifier(torch.clamp(x + uap + extra, 0, 1)).argmax(dim=1)
                    ) != int(benign_pred[i])
                if fooled:
                    uap = project_to_ball(uap + extra, p, zeta)
                    break
        with torch.no_grad():
            adv_pred = classifier(torch.clamp(pixels + uap, 0, 1)).argmax(dim=1)
        fooling = float((adv_pred != benign_pred).float().mean())
        if fooling >= target_fooling:
            converged = True
            break
    perturbation = Perturbation(uap, p, zeta, perturbation_norm(uap, p))
    return perturbation, {"fooling_on_train_sample": fooling, "converged": converged}
