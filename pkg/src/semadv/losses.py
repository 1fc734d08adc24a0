"""Scalar objectives used for attribute training and attack optimization.

This module collects every loss the package optimizes:

* ``directional_loss`` — aligns the *change* between two images with the
  change between two text prompts, measured by cosine similarity in a shared
  embedding space.
* ``clip_training_loss`` — the directional term plus an L1 anchor that keeps
  the edited clean-image estimate near the unedited one.
* ``adversarial_loss`` — cross-entropy pushing a classifier toward a chosen
  target label.
* ``semantic_training_loss`` — the full attribute-training objective with a
  per-component breakdown.
* ``attack_objective`` — the multi-attribute attack objective: target-label
  cross-entropy on the attacked classifier, source-label cross-entropy on an
  auxiliary classifier, and an L1 penalty on the attribute weights.

All functions are pure, operate on ``torch.Tensor`` inputs, and return 0-dim
tensors that participate in autograd. Classifier inputs are clamped to
``[-1, 1]`` in one shared helper so training, attack, and evaluation all see
the same preprocessing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, runtime_checkable

import torch
from torch import Tensor

__all__ = [
    "DegenerateDirectionError",
    "EncoderPair",
    "LossWeights",
    "SemanticLoss",
    "AttackObjective",
    "prepare_classifier_input",
    "directional_loss",
    "clip_training_loss",
    "adversarial_loss",
    "semantic_training_loss",
    "attack_objective",
    "text_cosine",
    "default_reg_weight",
]

# Norms at or below this are treated as zero direction vectors.
_ZERO_NORM_EPS = 1e-12


class DegenerateDirectionError(ValueError):
    """Raised when a direction vector (image or text delta) has zero norm."""


@runtime_checkable
class EncoderPair(Protocol):
    """Contract for a paired image/text embedding model.

    Implementations must map a batch of images ``(B, C, H, W)`` to a batch of
    embeddings ``(B, d)`` and a text string to a single embedding ``(d,)``.
    Embeddings must be finite, and non-degenerate inputs must embed with
    strictly positive norm.
    """

    def embed_image(self, images: Tensor) -> Tensor: ...

    def embed_text(self, text: str) -> Tensor: ...


@dataclass(frozen=True)
class LossWeights:
    """Scalar coefficients for the composite objectives.

    ``lambda_reg`` scales the L1 anchor in the attribute-training loss,
    ``lambda_adv`` scales its adversarial term, and ``lambda_1`` /
    ``lambda_2`` scale the auxiliary-classifier term and the weight penalty
    in the attack objective. All must be finite and non-negative.
    """

    lambda_reg: float = 0.0
    lambda_adv: float = 1.0
    lambda_1: float = 1.0
    lambda_2: float = 10.0

    def __post_init__(self) -> None:
        for name in ("lambda_reg", "lambda_adv", "lambda_1", "lambda_2"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class SemanticLoss:
    """Breakdown of the attribute-training objective.

    ``total`` is the optimized scalar; the remaining fields are its additive
    components (already scaled by their coefficients), so
    ``direction + regularization + adversarial == total`` up to float
    rounding. All fields share the autograd graph of the inputs.
    """

    total: Tensor
    direction: Tensor
    regularization: Tensor
    adversarial: Tensor


@dataclass(frozen=True)
class AttackObjective:
    """Breakdown of the attack objective; ``total`` is the optimized scalar."""

    total: Tensor
    target_term: Tensor
    source_term: Tensor
    weight_penalty: Tensor


def prepare_classifier_input(images: Tensor) -> Tensor:
    """Map images into the classifier input range by clamping to [-1, 1].

    Clean-image estimates taken early in sampling can overshoot the data
    range; every classifier evaluation in this package routes through this
    helper so the preprocessing is identical everywhere.
    """
    return images.clamp(-1.0, 1.0)


def _as_batched_image(x: Tensor) -> Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() == 4:
        return x
    raise ValueError(f"expected image tensor of 3 or 4 dims, got shape {tuple(x.shape)}")


def _text_direction(pair: EncoderPair, c_target: str, c_source: str) -> Tensor:
    delta = pair.embed_text(c_target) - pair.embed_text(c_source)
    if delta.dim() != 1:
        raise ValueError(f"embed_text must return a 1-d vector, got shape {tuple(delta.shape)}")
    if float(delta.norm()) <= _ZERO_NORM_EPS:
        raise DegenerateDirectionError(
            f"text direction is zero between {c_source!r} and {c_target!r}"
        )
    return delta


def directional_loss(
    x_edit: Tensor,
    x_src: Tensor,
    c_target: str,
    c_source: str,
    pair: EncoderPair,
) -> Tensor:
    """Misalignment between the image-space change and the text-space change.

    Returns ``1 - cos(delta_image, delta_text)`` averaged over the batch,
    a value in ``[0, 2]``: 0 when the image edit moves exactly along the text
    direction, 2 when it moves exactly against it. Invariant to positive
    rescaling of either delta vector.

    Raises :class:`DegenerateDirectionError` if the text delta or any
    per-sample image delta has zero norm.
    """
    x_edit = _as_batched_image(x_edit)
    x_src = _as_batched_image(x_src)
    if x_edit.shape != x_src.shape:
        raise ValueError(
            f"image shapes must match, got {tuple(x_edit.shape)} vs {tuple(x_src.shape)}"
        )
    delta_t = _text_direction(pair, c_target, c_source)
    delta_i = pair.embed_image(x_edit) - pair.embed_image(x_src)  # (B, d)
    if delta_i.dim() != 2:
        raise ValueError(
            f"embed_image must return (batch, dim) embeddings, got shape {tuple(delta_i.shape)}"
        )
    norms = delta_i.norm(dim=1)
    if bool((norms <= _ZERO_NORM_EPS).any()):
        raise DegenerateDirectionError("image direction has zero norm for at least one sample")
    cos = (delta_i @ delta_t) / (norms * delta_t.norm())
    return (1.0 - cos).mean()


def clip_training_loss(
    p_edit: Tensor,
    p_src: Tensor,
    c_target: str,
    c_source: str,
    pair: EncoderPair,
    lambda_reg: float,
) -> Tensor:
    """Directional loss plus an L1 anchor tying the edit to its source.

    The anchor is the mean absolute difference between the edited and source
    clean-image estimates, scaled by ``lambda_reg``; it discourages edits
    from drifting arbitrarily far even when well aligned with the text
    direction.
    """
    lambda_reg = float(lambda_reg)
    if not math.isfinite(lambda_reg) or lambda_reg < 0.0:
        raise ValueError(f"lambda_reg must be finite and >= 0, got {lambda_reg!r}")
    direction = directional_loss(p_edit, p_src, c_target, c_source, pair)
    return direction + lambda_reg * (p_edit - p_src).abs().mean()


def _validate_labels(logits: Tensor, labels: Tensor | int, name: str) -> Tensor:
    num_classes = logits.shape[-1]
    if isinstance(labels, int):
        labels = torch.tensor(labels, device=logits.device)
    labels = labels.to(device=logits.device, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels.expand(logits.shape[0])
    if labels.shape != logits.shape[:1]:
        raise ValueError(
            f"{name} must be a scalar or match the batch, got shape {tuple(labels.shape)}"
        )
    if bool((labels < 0).any()) or bool((labels >= num_classes).any()):
        raise ValueError(
            f"{name} out of range for {num_classes} classes: {labels.tolist()}"
        )
    return labels


def adversarial_loss(
    f: Callable[[Tensor], Tensor],
    p_edit: Tensor,
    y_target: Tensor | int,
) -> Tensor:
    """Cross-entropy of classifier ``f`` against the target label.

    ``p_edit`` is clamped into the classifier range first (see
    :func:`prepare_classifier_input`); gradients flow back through the clamp
    to ``p_edit``. Minimizing this drives ``f`` to emit ``y_target``.
    """
    p_edit = _as_batched_image(p_edit)
    logits = f(prepare_classifier_input(p_edit))
    if logits.dim() != 2:
        raise ValueError(f"classifier must return (batch, classes) logits, got {tuple(logits.shape)}")
    labels = _validate_labels(logits, y_target, "y_target")
    return torch.nn.functional.cross_entropy(logits, labels)


def semantic_training_loss(
    p_edit: Tensor,
    p_src: Tensor,
    c_target: str,
    c_source: str,
    pair: EncoderPair,
    weights: LossWeights,
    f: Optional[Callable[[Tensor], Tensor]] = None,
    y_target: Tensor | int | None = None,
) -> SemanticLoss:
    """Full attribute-training objective with a per-component breakdown.

    ``direction + regularization`` reproduce :func:`clip_training_loss`;
    the adversarial term is ``lambda_adv`` times :func:`adversarial_loss`.
    With ``lambda_adv == 0`` the classifier is never evaluated (``f`` may be
    omitted), which trains a clean, non-adversarial attribute.
    """
    direction = directional_loss(p_edit, p_src, c_target, c_source, pair)
    regularization = weights.lambda_reg * (p_edit - p_src).abs().mean()
    if weights.lambda_adv > 0.0:
        if f is None or y_target is None:
            raise ValueError("lambda_adv > 0 requires both a classifier and a target label")
        adversarial = weights.lambda_adv * adversarial_loss(f, p_edit, y_target)
    else:
        adversarial = torch.zeros((), dtype=direction.dtype, device=direction.device)
    total = direction + regularization + adversarial
    return SemanticLoss(
        total=total,
        direction=direction,
        regularization=regularization,
        adversarial=adversarial,
    )


def attack_objective(
    f: Callable[[Tensor], Tensor],
    g: Callable[[Tensor], Tensor],
    p_edit: Tensor,
    y_target: Tensor | int,
    y_source: Tensor | int,
    weights: Tensor,
    lambda_1: float,
    lambda_2: float,
) -> AttackObjective:
    """Multi-attribute attack objective with a per-term breakdown.

    ``total = CE(f(p), y_target) + lambda_1 * CE(g(p), y_source)
    + lambda_2 * sum(|weights|)`` where ``p`` is the clamped ``p_edit``.
    The attacked classifier ``f`` is pushed toward the target label while the
    auxiliary classifier ``g`` is held at the source label, so the image must
    cross ``f``'s boundary without losing its source-class appearance; the L1
    penalty keeps attribute weights, and hence semantic shifts, small.

    ``weights`` may have any shape; the penalty sums absolute values over all
    entries. Gradients w.r.t. ``weights`` at exactly 0 use the 0 element of
    the L1 subdifferential (sign(0) = 0).
    """
    lambda_1 = float(lambda_1)
    lambda_2 = float(lambda_2)
    for name, value in (("lambda_1", lambda_1), ("lambda_2", lambda_2)):
        if not math.isfinite(value) or value < 0.0:
            raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
    if not bool(torch.isfinite(weights).all()):
        raise ValueError("attribute weights must be finite")
    p_edit = _as_batched_image(p_edit)
    p = prepare_classifier_input(p_edit)
    logits_f = f(p)
    logits_g = g(p)
    for name, logits in (("f", logits_f), ("g", logits_g)):
        if logits.dim() != 2:
            raise ValueError(
                f"classifier {name} must return (batch, classes) logits, got {tuple(logits.shape)}"
            )
    labels_f = _validate_labels(logits_f, y_target, "y_target")
    labels_g = _validate_labels(logits_g, y_source, "y_source")
    target_term = torch.nn.functional.cross_entropy(logits_f, labels_f)
    source_term = lambda_1 * torch.nn.functional.cross_entropy(logits_g, labels_g)
    weight_penalty = lambda_2 * weights.abs().sum()
    total = target_term + source_term + weight_penalty
    return AttackObjective(
        total=total,
        target_term=target_term,
        source_term=source_term,
        weight_penalty=weight_penalty,
    )


def text_cosine(pair: EncoderPair, text_a: str, text_b: str) -> float:
    """Cosine similarity between two prompt embeddings."""
    with torch.no_grad():
        e_a = pair.embed_text(text_a).detach()
        e_b = pair.embed_text(text_b).detach()
    denom = float(e_a.norm()) * float(e_b.norm())
    if denom <= _ZERO_NORM_EPS:
        raise DegenerateDirectionError("prompt embedding has zero norm")
    return float(e_a @ e_b) / denom


def default_reg_weight(pair: EncoderPair, c_source: str, c_target: str) -> float:
    """Default L1-anchor coefficient: 3x the prompt cosine similarity.

    Closely related prompts (high cosine) describe subtle edits, so the edit
    is anchored strongly to the source; distant prompts relax the anchor.
    Negative similarities clamp to 0 because a negative anchor weight would
    reward drift.
    """
    return 3.0 * max(text_cosine(pair, c_source, c_target), 0.0)
