"""Training per-attribute semantic functions along edited trajectories.

The procedure has two stages. First, training images are deterministically
inverted to top-of-plan latents (cached on disk, content-addressed). Second,
for each latent two trajectories are rolled out side by side over the editing
segment of the plan: a source trajectory with the frozen denoiser alone, and
an edited trajectory whose bottleneck receives the semantic function's output
at every editing step. At each such step the training objective compares the
two predicted clean images — directional text alignment, an L1 anchor to the
source prediction, and optionally a cross-entropy push toward a target label
— and updates only the semantic function.

Gradient horizon: by default the loss is taken per editing step with an
immediate optimizer update, and the latent entering each step is detached, so
gradients never span more than one denoiser evaluation. The alternative
reading — one loss at the end of the editing segment, backpropagated through
the whole segment — is available as ``loss_placement="trajectory_end"``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .losses import (
    EncoderPair,
    LossWeights,
    adversarial_loss,
    default_reg_weight,
    semantic_training_loss,
)
from .sampler import TimestepPlan, ddim_generate, ddim_invert, uniform_plan
from .schedule import NoiseSchedule, decompose_step, predict_x0
from .semantic import AttributeSpec, SemanticFunction
from .unet import DivergenceError, ToyUNet, state_dict_digest

__all__ = [
    "TrainerConfig",
    "CacheCorruptionError",
    "precompute_latents",
    "sample_training_images",
    "train_attribute",
    "evaluate_attribute",
]

_PLACEMENTS = ("per_step", "trajectory_end")


class CacheCorruptionError(RuntimeError):
    """A latent cache entry does not match its recorded content hash."""


@dataclass(frozen=True)
class TrainerConfig:
    """Attribute-training settings.

    ``weights`` may be left ``None`` to resolve at train time: the L1-anchor
    coefficient then defaults to three times the prompt cosine similarity
    (clamped at zero) and the adversarial coefficient to 1. Setting an
    explicit ``LossWeights`` with ``lambda_adv=0`` trains the clean,
    non-adversarial variant of the attribute.
    """

    s_inv: int = 40
    epochs: int = 1
    n_samples: int = 64
    lr: float = 1e-2
    seed: int = 0
    weights: Optional[LossWeights] = None
    loss_placement: str = "per_step"
    init_scale: float = 1e-3

    def __post_init__(self) -> None:
        if self.s_inv < 2:
            raise ValueError(f"s_inv must be >= 2, got {self.s_inv}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if not (self.lr > 0.0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be positive and finite, got {self.lr}")
        if self.loss_placement not in _PLACEMENTS:
            raise ValueError(
                f"loss_placement must be one of {_PLACEMENTS}, got {self.loss_placement!r}"
            )
        if not (self.init_scale >= 0.0 and math.isfinite(self.init_scale)):
            raise ValueError(f"init_scale must be >= 0 and finite, got {self.init_scale}")


def _image_digest(image: Tensor) -> str:
    data = image.detach().to(torch.float32).contiguous().cpu().numpy().tobytes()
    return hashlib.sha256(data).hexdigest()


def _schedule_digest(schedule: NoiseSchedule) -> str:
    payload = np.asarray([schedule.alpha_bar(t) for t in range(schedule.T + 1)], dtype=np.float64)
    return hashlib.sha256(payload.tobytes()).hexdigest()


def _cache_key(image_sha: str, s_inv: int, model_sha: str, schedule_sha: str) -> str:
    raw = f"{image_sha}:{s_inv}:{model_sha}:{schedule_sha}"
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def _store_latent(cache_dir: Path, key: str, latent: Tensor, meta: dict) -> None:
    npy_path = cache_dir / f"{key}.npy"
    np.save(npy_path, latent.detach().cpu().numpy())
    meta = dict(meta, latent_sha=hashlib.sha256(npy_path.read_bytes()).hexdigest())
    (cache_dir / f"{key}.json").write_text(json.dumps(meta, sort_keys=True))


def _load_latent(cache_dir: Path, key: str, expected_meta: dict) -> Optional[Tensor]:
    npy_path = cache_dir / f"{key}.npy"
    meta_path = cache_dir / f"{key}.json"
    if not (npy_path.exists() and meta_path.exists()):
        return None
    meta = json.loads(meta_path.read_text())
    actual_sha = hashlib.sha256(npy_path.read_bytes()).hexdigest()
    if meta.get("latent_sha") != actual_sha:
        raise CacheCorruptionError(f"latent bytes for {key} do not match their recorded hash")
    for field, expected in expected_meta.items():
        if meta.get(field) != expected:
            raise CacheCorruptionError(
                f"cache entry {key} was produced under different inputs "
                f"({field}: {meta.get(field)!r} != {expected!r})"
            )
    return torch.from_numpy(np.load(npy_path))


def precompute_latents(
    model: ToyUNet,
    schedule: NoiseSchedule,
    images: Tensor,
    s_inv: int,
    cache_dir: Optional[str | Path] = None,
) -> Tensor:
    """Deterministic inversion endpoints for a batch of training images.

    With a cache directory, each image's latent is stored content-addressed
    by (image bytes, s_inv, model weights, schedule); a later call with the
    same inputs loads instead of recomputing, and recomputation writes
    byte-identical entries. A stored entry whose bytes or provenance fields
    disagree with its own record raises :class:`CacheCorruptionError`.
    """
    if images.dim() != 4 or images.shape[0] < 1:
        raise ValueError("images must be a nonempty (N, C, H, W) batch")
    if s_inv < 2:
        raise ValueError(f"s_inv must be >= 2, got {s_inv}")
    plan = uniform_plan(schedule.T, s_inv)
    model_sha = state_dict_digest(model)
    schedule_sha = _schedule_digest(schedule)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)

    latents = []
    for i in range(images.shape[0]):
        image = images[i : i + 1]
        meta = {
            "image_sha": _image_digest(image),
            "s_inv": int(s_inv),
            "model_sha": model_sha,
            "schedule_sha": schedule_sha,
        }
        key = _cache_key(meta["image_sha"], s_inv, model_sha, schedule_sha)
        latent = _load_latent(cache, key, meta) if cache is not None else None
        if latent is None:
            latent = ddim_invert(model, schedule, image, plan)
            if cache is not None:
                _store_latent(cache, key, latent, meta)
        latents.append(latent)
    return torch.cat(latents, dim=0)


def sample_training_images(
    model: ToyUNet,
    schedule: NoiseSchedule,
    n: int,
    plan: TimestepPlan,
    seed: int = 0,
) -> Tensor:
    """Deterministic model generations to train attributes on.

    Attribute training defaults to images the denoiser itself produces, so
    the pipeline needs no extra data; real dataset samples can be passed to
    :func:`precompute_latents` instead.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    gen = torch.Generator().manual_seed(seed)
    x_T = torch.randn((n, model.in_channels, model.image_size, model.image_size), generator=gen)
    return ddim_generate(model, schedule, x_T, plan, eta=0.0).x0


def _resolve_weights(
    config: TrainerConfig, pair: EncoderPair, spec: AttributeSpec
) -> LossWeights:
    if config.weights is not None:
        return config.weights
    return LossWeights(lambda_reg=default_reg_weight(pair, spec.source_text, spec.target_text))


def _editing_steps(plan: TimestepPlan) -> list:
    if plan.t_edit is None:
        raise ValueError("training plan must carry a t_edit marker")
    steps = [(t, t_prev) for t, t_prev in plan.steps_down() if plan.is_editing_step(t, t_prev)]
    if not steps:
        raise ValueError("plan has no editing steps; nothing constrains the attribute")
    return steps


def _source_step(model: ToyUNet, schedule: NoiseSchedule, x: Tensor, t: int, t_prev: int):
    with torch.no_grad():
        eps, _ = model.predict(x, t)
        dec = decompose_step(x, eps, t, t_prev, schedule, eta=0.0)
        x_prev = math.sqrt(schedule.alpha_bar(t_prev)) * dec.p_term + dec.d_term
    return x_prev, dec.p_term


def _edited_step(
    model: ToyUNet,
    schedule: NoiseSchedule,
    function: SemanticFunction,
    x: Tensor,
    t: int,
    t_prev: int,
):
    """One injected step with gradients flowing only through the function."""
    state = model.encode(x, t)
    delta = function(state.h, t)
    eps_tilde = model.decode(state, state.h + delta)
    p_edit = predict_x0(x, eps_tilde, t, schedule)
    with torch.no_grad():
        eps_plain = model.decode(state, state.h)
        dec = decompose_step(x, eps_plain, t, t_prev, schedule, eta=0.0)
    x_prev = math.sqrt(schedule.alpha_bar(t_prev)) * p_edit + dec.d_term
    return x_prev, p_edit


def train_attribute(
    model: ToyUNet,
    schedule: NoiseSchedule,
    function: SemanticFunction,
    latents: Tensor,
    spec: AttributeSpec,
    pair: EncoderPair,
    plan: TimestepPlan,
    config: TrainerConfig,
    f=None,
    y_target: Optional[int] = None,
):
    """Fit one semantic function over the editing segment of the plan.

    Returns ``(function, report)``; the function is updated in place. The
    report carries per-epoch means of the total loss and its components. The
    denoiser, encoder pair, and classifier are never modified. A function
    still emitting exactly zero is first given a small random output layer
    (``config.init_scale``), since the objective is degenerate while the two
    trajectories coincide; with ``epochs=0`` the function is returned
    untouched.
    """
    if latents.dim() != 4 or latents.shape[0] < 1:
        raise ValueError("latents must be a nonempty (N, C, H, W) batch")
    steps = _editing_steps(plan)
    weights = _resolve_weights(config, pair, spec)
    if weights.lambda_adv > 0.0 and (f is None or y_target is None):
        raise ValueError("adversarial training requires both a classifier and a target label")

    if config.epochs > 0 and config.init_scale > 0.0 and function.emits_zero():
        # An all-zero function keeps both trajectories identical, where the
        # objective is degenerate; start from a small random output layer.
        function.randomize_output_layer(config.init_scale, config.seed)

    optimizer = torch.optim.Adam(function.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    curve = {"total": [], "direction": [], "regularization": [], "adversarial": []}

    def objective(p_edit: Tensor, p_src: Tensor):
        return semantic_training_loss(
            p_edit, p_src, spec.target_text, spec.source_text, pair, weights, f=f, y_target=y_target
        )

    def step_optimizer(loss: Tensor, where: str) -> None:
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at {where}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    for epoch in range(config.epochs):
        sums = {k: 0.0 for k in curve}
        count = 0
        order = torch.randperm(latents.shape[0], generator=gen)
        for idx in order.tolist():
            x_edit = latents[idx : idx + 1].detach()
            x_src = x_edit
            terms = None
            for t, t_prev in steps:
                if config.loss_placement == "per_step":
                    x_edit = x_edit.detach()
                x_src, p_src = _source_step(model, schedule, x_src, t, t_prev)
                x_edit, p_edit = _edited_step(model, schedule, function, x_edit, t, t_prev)
                if config.loss_placement == "per_step":
                    terms = objective(p_edit, p_src)
                    step_optimizer(terms.total, f"t={t} (sample {idx}, epoch {epoch})")
                    x_edit = x_edit.detach()
                    _accumulate(sums, terms)
                    count += 1
            if config.loss_placement == "trajectory_end":
                terms = objective(p_edit, p_src)
                step_optimizer(terms.total, f"segment end (sample {idx}, epoch {epoch})")
                _accumulate(sums, terms)
                count += 1
        for k in curve:
            curve[k].append(sums[k] / count)

    report = {
        "loss_curve": curve["total"],
        "direction_curve": curve["direction"],
        "regularization_curve": curve["regularization"],
        "adversarial_curve": curve["adversarial"],
        "weights": {
            "lambda_reg": weights.lambda_reg,
            "lambda_adv": weights.lambda_adv,
        },
        "editing_steps": [t for t, _ in steps],
        "n_samples": int(latents.shape[0]),
        "epochs": config.epochs,
        "loss_placement": config.loss_placement,
    }
    return function, report


def _accumulate(sums: dict, terms) -> None:
    sums["total"] += float(terms.total.detach())
    sums["direction"] += float(terms.direction.detach())
    sums["regularization"] += float(terms.regularization.detach())
    sums["adversarial"] += float(terms.adversarial.detach())


def evaluate_attribute(
    model: ToyUNet,
    schedule: NoiseSchedule,
    function: SemanticFunction,
    latents: Tensor,
    plan: TimestepPlan,
    f,
    y_target: int,
) -> float:
    """Mean target cross-entropy of edited predictions over held-out latents.

    Rolls the edited trajectory (function applied at weight 1) over the
    editing segment and averages ``CE(f(P_t), y_target)`` across steps and
    samples — the quantity adversarial training is expected to reduce.
    """
    steps = _editing_steps(plan)
    total, count = 0.0, 0
    with torch.no_grad():
        x_edit = latents.detach()
        for t, t_prev in steps:
            x_edit, p_edit = _edited_step(model, schedule, function, x_edit, t, t_prev)
            total += float(adversarial_loss(f, p_edit, y_target))
            count += 1
    return total / count
