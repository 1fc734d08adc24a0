"""Iterative multi-attribute weight optimization through edited generation.

One attack owns a table of weights — one row per attribute, one column per
editing step (or a single shared column). Each outer iteration rolls the
three-phase process from a fixed starting noise: at every editing step the
attribute functions' bottleneck outputs are combined under the active weight
column, the predicted clean image is pushed through both classifiers, and the
column takes one adaptive gradient step on the attack objective before the
trajectory moves on (using the just-updated weights by default). Phases two
and three run the plain deterministic and stochastic steps. The iteration's
final image is checked against the target label — through exactly the same
preprocessing the objective uses — and the attack stops at the first success.

Weights persist across iterations; only the starting noise is fixed, so later
iterations resume the same optimization with fresh stochastic tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
from torch import Tensor

from .losses import LossWeights, attack_objective, prepare_classifier_input
from .sampler import TimestepPlan
from .schedule import NoiseSchedule, decompose_step, predict_x0
from .semantic import AttributeSet
from .unet import ToyUNet

__all__ = [
    "WeightTable",
    "AttackConfig",
    "AttackResult",
    "NonFiniteLossError",
    "run_attack",
    "single_attribute_line_search",
    "mean_abs_weight",
]

_GRADIENT_SOURCES = ("p_t", "x_t")
_TYINGS = ("per_timestep", "shared")


class NonFiniteLossError(RuntimeError):
    """The attack objective or a weight update stopped being finite."""


@dataclass
class WeightTable:
    """Per-attribute, per-editing-step weights.

    ``values`` has one row per attribute and either one column per editing
    step or a single column shared by all of them. ``editing_timesteps``
    lists the source timesteps of the editing steps, descending (trajectory
    order).
    """

    values: Tensor
    editing_timesteps: Tuple[int, ...]
    tying: str = "per_timestep"

    def __post_init__(self) -> None:
        self.editing_timesteps = tuple(int(t) for t in self.editing_timesteps)
        if self.tying not in _TYINGS:
            raise ValueError(f"tying must be one of {_TYINGS}, got {self.tying!r}")
        if self.values.dim() != 2 or self.values.shape[0] < 1:
            raise ValueError(f"values must be (M, columns), got {tuple(self.values.shape)}")
        expected = 1 if self.tying == "shared" else len(self.editing_timesteps)
        if not self.editing_timesteps:
            raise ValueError("editing_timesteps must be nonempty")
        if self.values.shape[1] != expected:
            raise ValueError(
                f"expected {expected} columns for tying={self.tying!r}, got {self.values.shape[1]}"
            )
        if not torch.isfinite(self.values).all():
            raise ValueError("weight table entries must be finite")

    @classmethod
    def initial(
        cls,
        n_attributes: int,
        editing_timesteps: Sequence[int],
        tying: str = "per_timestep",
        generator: Optional[torch.Generator] = None,
    ) -> "WeightTable":
        cols = 1 if tying == "shared" else len(editing_timesteps)
        values = torch.randn((n_attributes, cols), generator=generator)
        return cls(values=values, editing_timesteps=tuple(editing_timesteps), tying=tying)

    def column_index(self, t: int) -> int:
        if self.tying == "shared":
            return 0
        return self.editing_timesteps.index(int(t))

    def column(self, t: int) -> Tensor:
        return self.values[:, self.column_index(t)]

    def as_matrix(self) -> Tensor:
        """(M, #editing steps) view, expanding a shared column."""
        if self.tying == "shared":
            return self.values.expand(-1, len(self.editing_timesteps))
        return self.values

    def detached_copy(self) -> "WeightTable":
        return WeightTable(
            values=self.values.detach().clone(),
            editing_timesteps=self.editing_timesteps,
            tying=self.tying,
        )


def mean_abs_weight(result: "AttackResult") -> float:
    """Flat mean of |w| over every (attribute, editing step) entry."""
    return float(result.weights.as_matrix().abs().mean())


@dataclass(frozen=True)
class AttackConfig:
    """Attack-loop settings: budget, objective coefficients, update rule.

    ``lr_growth`` scales the step size geometrically per iteration
    (``lr * lr_growth**i``); 1.0 keeps the constant-rate update. A modest
    ramp (e.g. 1.3) makes successive iterations probe editing strengths from
    below, so the first success lands just past the classifier's boundary
    instead of overshooting it, which keeps the edit subtle.
    """

    iterations: int = 40
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 0.5
    lr_growth: float = 1.0
    gradient_source: str = "p_t"
    weight_tying: str = "per_timestep"
    post_update_transition: bool = True
    seed: int = 0
    adaptive_eps: float = 1e-8
    adaptive_decay: float = 0.9

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not (self.lr > 0.0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be positive and finite, got {self.lr}")
        if not (self.lr_growth > 0.0 and math.isfinite(self.lr_growth)):
            raise ValueError(f"lr_growth must be positive and finite, got {self.lr_growth}")
        if self.gradient_source not in _GRADIENT_SOURCES:
            raise ValueError(
                f"gradient_source must be one of {_GRADIENT_SOURCES}, got {self.gradient_source!r}"
            )
        if self.weight_tying not in _TYINGS:
            raise ValueError(f"weight_tying must be one of {_TYINGS}, got {self.weight_tying!r}")
        if not (self.adaptive_eps > 0.0):
            raise ValueError(f"adaptive_eps must be positive, got {self.adaptive_eps}")
        if not (0.0 <= self.adaptive_decay < 1.0):
            raise ValueError(f"adaptive_decay must be in [0, 1), got {self.adaptive_decay}")


@dataclass
class AttackResult:
    """Outcome of one attack: image, weights, and bookkeeping.

    ``success`` is re-verified on the stored image at record time, so
    ``success == (argmax f(clamp(x_0)) == y_target)`` always holds.
    """

    success: bool
    x_0: Tensor  # (C, H, W)
    weights: WeightTable
    iterations_used: int
    mean_abs_weight: float
    loss_trace: List[float]
    y_target: int
    y_source: int

    def to_record(self) -> dict:
        """JSON-compatible document (image excluded; saved separately)."""
        return {
            "success": bool(self.success),
            "iterations_used": int(self.iterations_used),
            "mean_abs_weight": float(self.mean_abs_weight),
            "loss_trace": [float(v) for v in self.loss_trace],
            "y_target": int(self.y_target),
            "y_source": int(self.y_source),
            "weight_tying": self.weights.tying,
            "editing_timesteps": list(self.weights.editing_timesteps),
            "weights": [[float(v) for v in row] for row in self.weights.values.tolist()],
        }


def _classify(classifier: Callable[[Tensor], Tensor], image: Tensor) -> int:
    with torch.no_grad():
        return int(classifier(prepare_classifier_input(image)).argmax(dim=1))


def _plain_step(
    model: ToyUNet,
    schedule: NoiseSchedule,
    x: Tensor,
    t: int,
    t_prev: int,
    eta: float,
    rng: Optional[torch.Generator],
) -> Tensor:
    with torch.no_grad():
        eps, _ = model.predict(x, max(int(t), 1))
        dec = decompose_step(x, eps, t, t_prev, schedule, eta)
        x_next = math.sqrt(schedule.alpha_bar(t_prev)) * dec.p_term + dec.d_term
        if dec.sigma > 0.0:
            if rng is None:
                raise ValueError("stochastic phase requires an rng")
            x_next = x_next + dec.sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype)
    return x_next


def _attribute_features(attrs: AttributeSet, h: Tensor, t: int) -> Tensor:
    with torch.no_grad():
        return torch.stack([fn(h, t) for fn in attrs.functions])  # (M, B, C, Hb, Wb)


def _combine(features: Tensor, column: Tensor) -> Tensor:
    return (column.view(-1, 1, 1, 1, 1) * features).sum(dim=0)


def run_attack(
    model: ToyUNet,
    schedule: NoiseSchedule,
    attrs: AttributeSet,
    f: Callable[[Tensor], Tensor],
    g: Callable[[Tensor], Tensor],
    y_target: int,
    y_source: int,
    x_T: Tensor,
    plan: TimestepPlan,
    config: AttackConfig,
) -> AttackResult:
    """Optimize attribute weights until the target classifier flips.

    The starting noise and the initial weight table are fixed up front; each
    of the up-to-``iterations`` rollouts updates the active weight column at
    every editing step (one adaptive, momentum-free gradient step on the
    attack objective, evaluated on the predicted clean image — or on the step
    output under the ``x_t`` ablation) and finishes the trajectory through
    the plain and stochastic phases. Success is declared by classifying the
    rollout's final image and re-checked when the result is recorded.
    """
    if len(attrs) == 0:
        raise ValueError("attack needs at least one attribute")
    if plan.t_edit is None or plan.t_boost is None:
        raise ValueError("plan must carry t_edit and t_boost markers")
    if x_T.dim() != 4 or x_T.shape[0] != 1:
        raise ValueError(f"x_T must be a single (1, C, H, W) latent, got {tuple(x_T.shape)}")
    editing_ts = tuple(plan.editing_timesteps())
    if not editing_ts:
        raise ValueError("plan has no editing steps")

    weight_rng = torch.Generator().manual_seed(config.seed)
    noise_rng = torch.Generator().manual_seed(config.seed + 1)
    table = WeightTable.initial(len(attrs), editing_ts, config.weight_tying, weight_rng)
    table.values.requires_grad_(True)
    accum = torch.zeros_like(table.values)

    lw = config.loss_weights
    loss_trace: List[float] = []
    x_0 = x_T[0].detach().clone()
    success = False
    iterations_used = config.iterations

    for iteration in range(config.iterations):
        x = x_T.detach()
        step_losses: List[float] = []
        for t, t_prev in plan.steps_down():
            if plan.is_editing_step(t, t_prev):
                x, loss_value = _editing_step(
                    model, schedule, attrs, f, g, y_target, y_source,
                    x, t, t_prev, table, accum, config, iteration,
                )
                step_losses.append(loss_value)
            else:
                eta = 1.0 if plan.is_stochastic_step(t, t_prev) else 0.0
                x = _plain_step(model, schedule, x, t, t_prev, eta, noise_rng)
        loss_trace.append(sum(step_losses) / len(step_losses))
        x_0 = x[0].detach().clone()
        if _classify(f, x.detach()) == y_target:
            success = True
            iterations_used = iteration + 1
            break

    final = table.detached_copy()
    # record-time re-verification: the stored flag must match the stored image
    success = _classify(f, x_0.unsqueeze(0)) == y_target
    return AttackResult(
        success=success,
        x_0=x_0,
        weights=final,
        iterations_used=iterations_used,
        mean_abs_weight=float(final.as_matrix().abs().mean()),
        loss_trace=loss_trace,
        y_target=int(y_target),
        y_source=int(y_source),
    )


def _editing_step(
    model: ToyUNet,
    schedule: NoiseSchedule,
    attrs: AttributeSet,
    f: Callable[[Tensor], Tensor],
    g: Callable[[Tensor], Tensor],
    y_target: int,
    y_source: int,
    x: Tensor,
    t: int,
    t_prev: int,
    table: WeightTable,
    accum: Tensor,
    config: AttackConfig,
    iteration: int,
) -> Tuple[Tensor, float]:
    """One injected step plus one adaptive update of the active column."""
    with torch.no_grad():
        state = model.encode(x, t)
        features = _attribute_features(attrs, state.h, t)
        eps_plain = model.decode(state, state.h)
        dec = decompose_step(x, eps_plain, t, t_prev, schedule, eta=0.0)
    abar_prev_sqrt = math.sqrt(schedule.alpha_bar(t_prev))

    column = table.column(t)
    delta = _combine(features, column)
    eps_tilde = model.decode(state, state.h + delta)
    p_edit = predict_x0(x, eps_tilde, t, schedule)
    if config.gradient_source == "x_t":
        objective_input = abar_prev_sqrt * p_edit + dec.d_term
    else:
        objective_input = p_edit
    obj = attack_objective(
        f, g, objective_input, y_target, y_source, column,
        lambda_1=config.loss_weights.lambda_1,
        lambda_2=config.loss_weights.lambda_2,
    )
    if not torch.isfinite(obj.total):
        raise NonFiniteLossError(
            f"attack objective became non-finite at iteration {iteration}, t={t}: "
            f"target={float(obj.target_term.detach())!r}, "
            f"source={float(obj.source_term.detach())!r}, "
            f"penalty={float(obj.weight_penalty.detach())!r}"
        )
    (grad,) = torch.autograd.grad(obj.total, table.values)
    with torch.no_grad():
        idx = table.column_index(t)
        g_col = grad[:, idx]
        accum[:, idx] = (
            config.adaptive_decay * accum[:, idx]
            + (1.0 - config.adaptive_decay) * g_col * g_col
        )
        step_lr = config.lr * config.lr_growth**iteration
        table.values[:, idx] -= step_lr * g_col / (accum[:, idx].sqrt() + config.adaptive_eps)
        if not torch.isfinite(table.values).all():
            raise NonFiniteLossError(
                f"weight update became non-finite at iteration {iteration}, t={t}"
            )
        if config.post_update_transition:
            delta_next = _combine(features, table.column(t))
            eps_next = model.decode(state, state.h + delta_next)
            p_next = predict_x0(x, eps_next, t, schedule)
        else:
            p_next = p_edit.detach()
        x_next = abar_prev_sqrt * p_next + dec.d_term
    return x_next, float(obj.total.detach())


def single_attribute_line_search(
    model: ToyUNet,
    schedule: NoiseSchedule,
    attrs: AttributeSet,
    f: Callable[[Tensor], Tensor],
    y_target: int,
    x_T: Tensor,
    plan: TimestepPlan,
    weight_grid: Sequence[float],
    seed: int = 0,
    y_source: int = -1,
) -> AttackResult:
    """Scan a growing uniform weight for one attribute until f flips.

    Each candidate weight is applied identically at every editing step; the
    first (hence smallest) succeeding grid value wins. Every candidate rolls
    out with an identically seeded stochastic tail, so truncating the grid
    after a succeeding value reproduces the same result.
    """
    if len(attrs) != 1:
        raise ValueError(f"line search takes exactly one attribute, got {len(attrs)}")
    grid = [float(v) for v in weight_grid]
    if not grid:
        raise ValueError("weight grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"weight grid must be strictly increasing, got {grid}")
    if plan.t_edit is None or plan.t_boost is None:
        raise ValueError("plan must carry t_edit and t_boost markers")
    if x_T.dim() != 4 or x_T.shape[0] != 1:
        raise ValueError(f"x_T must be a single (1, C, H, W) latent, got {tuple(x_T.shape)}")
    editing_ts = tuple(plan.editing_timesteps())
    if not editing_ts:
        raise ValueError("plan has no editing steps")

    function = attrs.functions[0]
    trace: List[float] = []
    x_0 = x_T[0].detach().clone()
    chosen = grid[-1]
    success = False
    tried = 0

    for value in grid:
        tried += 1
        rng = torch.Generator().manual_seed(seed)
        x = x_T.detach()
        with torch.no_grad():
            for t, t_prev in plan.steps_down():
                if plan.is_editing_step(t, t_prev):
                    state = model.encode(x, t)
                    delta = value * function(state.h, t)
                    eps_plain = model.decode(state, state.h)
                    dec = decompose_step(x, eps_plain, t, t_prev, schedule, eta=0.0)
                    eps_tilde = model.decode(state, state.h + delta)
                    p_edit = predict_x0(x, eps_tilde, t, schedule)
                    x = math.sqrt(schedule.alpha_bar(t_prev)) * p_edit + dec.d_term
                else:
                    eta = 1.0 if plan.is_stochastic_step(t, t_prev) else 0.0
                    x = _plain_step(model, schedule, x, t, t_prev, eta, rng)
            logits = f(prepare_classifier_input(x))
            ce = torch.nn.functional.cross_entropy(
                logits, torch.tensor([int(y_target)], device=logits.device)
            )
        trace.append(float(ce))
        x_0 = x[0].detach().clone()
        chosen = value
        if int(logits.argmax(dim=1)) == y_target:
            success = True
            break

    table = WeightTable(
        values=torch.full((1, len(editing_ts)), chosen),
        editing_timesteps=editing_ts,
        tying="per_timestep",
    )
    success = _classify(f, x_0.unsqueeze(0)) == y_target
    return AttackResult(
        success=success,
        x_0=x_0,
        weights=table,
        iterations_used=tried,
        mean_abs_weight=float(table.as_matrix().abs().mean()),
        loss_trace=trace,
        y_target=int(y_target),
        y_source=int(y_source),
    )
