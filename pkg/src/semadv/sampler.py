"""Whole-trajectory procedures: generation, inversion, edited steps, phases.

A TimestepPlan is a strictly increasing subsequence of [0, T]; generation
walks it downward, inversion upward. Editing markers divide generation into
three phases: bottleneck-injected deterministic steps while the trajectory is
above t_edit, plain deterministic steps down to t_boost, and stochastic
(eta=1) steps below t_boost.

Phase membership: a step (t -> t_prev) is an editing step iff it lands at or
above t_edit (t_prev >= t_edit), so the edited segment of the trajectory is
exactly x_t for t >= t_edit and t_edit=T disables editing outright. A step is
stochastic iff its source t lies strictly below t_boost, so the step leaving
t_boost itself is still deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import math

import numpy as np
import torch

from semadv.schedule import NoiseSchedule, decompose_step, predict_x0
from semadv.unet import EncoderState, ToyUNet


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly increasing timesteps from 0 to T with optional phase markers."""

    tau: tuple
    t_edit: int | None = None
    t_boost: int | None = None

    def __post_init__(self):
        tau = tuple(int(t) for t in self.tau)
        object.__setattr__(self, "tau", tau)
        if len(tau) < 2:
            raise ValueError("plan needs at least two timesteps")
        if tau[0] != 0:
            raise ValueError("plan must start at 0")
        if any(b <= a for a, b in zip(tau, tau[1:])):
            raise ValueError("plan timesteps must be strictly increasing")
        for name in ("t_edit", "t_boost"):
            marker = getattr(self, name)
            if marker is not None and marker not in tau:
                raise ValueError(f"{name}={marker} is not a plan timestep")
        if self.t_edit is not None and self.t_boost is not None and self.t_boost > self.t_edit:
            raise ValueError("t_boost must not exceed t_edit")

    @property
    def S(self) -> int:
        return len(self.tau)

    @property
    def T(self) -> int:
        return self.tau[-1]

    @property
    def s_edit(self) -> int | None:
        return None if self.t_edit is None else self.tau.index(self.t_edit)

    @property
    def s_noise(self) -> int | None:
        return None if self.t_boost is None else self.tau.index(self.t_boost)

    def with_markers(self, t_edit: int, t_boost: int) -> "TimestepPlan":
        return replace(self, t_edit=t_edit, t_boost=t_boost)

    def steps_down(self):
        """(t, t_prev) pairs from the top of the plan to the bottom."""
        rev = self.tau[::-1]
        return list(zip(rev[:-1], rev[1:]))

    def steps_up(self):
        return list(zip(self.tau[:-1], self.tau[1:]))

    def is_editing_step(self, t: int, t_prev: int) -> bool:
        return self.t_edit is not None and t_prev >= self.t_edit

    def is_stochastic_step(self, t: int, t_prev: int) -> bool:
        return self.t_boost is not None and t < self.t_boost

    def editing_timesteps(self) -> list[int]:
        """Source timesteps of the editing steps, descending."""
        return [t for t, t_prev in self.steps_down() if self.is_editing_step(t, t_prev)]

    def nearest(self, t: float) -> int:
        """Plan member closest to t (ties resolve upward)."""
        diffs = [(abs(tt - t), tt) for tt in self.tau]
        best = min(d for d, _ in diffs)
        return max(tt for d, tt in diffs if d == best)


def uniform_plan(T: int, S: int, t_edit: int | None = None, t_boost: int | None = None) -> TimestepPlan:
    """S evenly spaced plan points over [0, T], endpoints included."""
    if not 2 <= S <= T + 1:
        raise ValueError(f"need 2 <= S <= T+1, got S={S}, T={T}")
    tau = np.unique(np.round(np.linspace(0, T, S)).astype(int))
    if tau.size != S:
        raise ValueError(f"S={S} collides after rounding on T={T}; pick a coarser plan")
    return TimestepPlan(tau=tuple(int(t) for t in tau), t_edit=t_edit, t_boost=t_boost)


@dataclass
class Trajectory:
    """Latents along a generation or inversion, plus per-step predicted x_0.

    Generation walks timesteps downward from T; inversion upward from 0.
    """

    timesteps: list = field(default_factory=list)  # plan order, aligned with xs
    xs: list = field(default_factory=list)  # x at each timestep, aligned
    pred_x0: dict = field(default_factory=dict)  # source t -> P_t
    pred_src: dict = field(default_factory=dict)  # source t -> uninjected P_t (editing steps)

    def append(self, t: int, x: torch.Tensor):
        self.timesteps.append(int(t))
        self.xs.append(x)

    @property
    def x0(self) -> torch.Tensor:
        if self.timesteps[-1] != 0:
            raise ValueError("trajectory does not reach t=0")
        return self.xs[-1]

    def x_at(self, t: int) -> torch.Tensor:
        return self.xs[self.timesteps.index(int(t))]


def _eps_at(model: ToyUNet, x: torch.Tensor, t: int) -> torch.Tensor:
    # the model is trained on t >= 1; the inversion update at t=0 evaluates at t=1
    eps, _ = model.predict(x, max(int(t), 1))
    return eps


def ddim_generate(model: ToyUNet, schedule: NoiseSchedule, x_T: torch.Tensor, plan: TimestepPlan, eta: float = 0.0, rng: torch.Generator | None = None) -> Trajectory:
    """Walk the plan from T to 0 with fixed eta."""
    if plan.T != schedule.T:
        raise ValueError("plan endpoint must equal schedule T")
    traj = Trajectory()
    x = x_T
    traj.append(plan.T, x)
    with torch.no_grad():
        for t, t_prev in plan.steps_down():
            eps = _eps_at(model, x, t)
            dec = decompose_step(x, eps, t, t_prev, schedule, eta)
            x = math.sqrt(schedule.alpha_bar(t_prev)) * dec.p_term + dec.d_term
            if dec.sigma > 0.0:
                if rng is None:
                    raise ValueError("eta > 0 requires an rng")
                x = x + dec.sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype)
            traj.pred_x0[t] = dec.p_term
            traj.append(t_prev, x)
    return traj


def ddim_invert(
    model: ToyUNet,
    schedule: NoiseSchedule,
    x_0: torch.Tensor,
    plan: TimestepPlan,
    return_trajectory: bool = False,
):
    """Deterministic inversion: latent whose eta=0 generation reconstructs x_0.

    With ``return_trajectory`` the full noising path is also returned as a
    Trajectory whose timesteps ascend from 0 (where x equals the input) to T.
    """
    if plan.T != schedule.T:
        raise ValueError("plan endpoint must equal schedule T")
    traj = Trajectory()
    x = x_0
    traj.append(0, x)
    with torch.no_grad():
        for t, t_next in plan.steps_up():
            eps = _eps_at(model, x, t)
            p = predict_x0(x, eps, t, schedule)
            abar_next = schedule.alpha_bar(t_next)
            x = math.sqrt(abar_next) * p + math.sqrt(1.0 - abar_next) * eps
            traj.pred_x0[t] = p
            traj.append(t_next, x)
    if return_trajectory:
        return x, traj
    return x


def _asymmetric_from_state(model: ToyUNet, state: EncoderState, x_t, t: int, t_prev: int, delta_h, schedule: NoiseSchedule):
    """Shared arithmetic for the edited deterministic step (eta=0).

    P comes from the injected noise estimate, D from the unmodified one.
    Returns (x_prev, P_edit, P_src, d_term).
    """
    eps = model.decode(state, state.h)
    eps_tilde = model.decode(state, state.h + delta_h)
    dec = decompose_step(x_t, eps, t, t_prev, schedule, eta=0.0)
    p_edit = predict_x0(x_t, eps_tilde, t, schedule)
    x_prev = math.sqrt(schedule.alpha_bar(t_prev)) * p_edit + dec.d_term
    return x_prev, p_edit, dec.p_term, dec.d_term


def asymmetric_step(
    model: ToyUNet,
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    delta_h: torch.Tensor,
    schedule: NoiseSchedule,
    return_direction: bool = False,
):
    """One edited step: inject delta_h into P_t while preserving D_t.

    Returns (x_prev, P_edit, P_src), plus the preserved D term when
    return_direction is set.
    """
    state = model.encode(x_t, t)
    x_prev, p_edit, p_src, d_term = _asymmetric_from_state(model, state, x_t, t, t_prev, delta_h, schedule)
    if return_direction:
        return x_prev, p_edit, p_src, d_term
    return x_prev, p_edit, p_src


def three_phase_generate(
    model: ToyUNet,
    schedule: NoiseSchedule,
    x_T: torch.Tensor,
    plan: TimestepPlan,
    delta_h_provider,
    rng: torch.Generator | None = None,
) -> Trajectory:
    """Edited generation: inject above t_edit, plain eta=0 down to t_boost, eta=1 below.

    delta_h_provider is called as provider(h, t) at each editing step and must
    return a bottleneck-shaped tensor.
    """
    if plan.t_edit is None or plan.t_boost is None:
        raise ValueError("plan must carry t_edit and t_boost markers")
    if plan.T != schedule.T:
        raise ValueError("plan endpoint must equal schedule T")
    traj = Trajectory()
    x = x_T
    traj.append(plan.T, x)
    with torch.no_grad():
        for t, t_prev in plan.steps_down():
            if plan.is_editing_step(t, t_prev):
                state = model.encode(x, t)
                delta = delta_h_provider(state.h, t)
                x, p_edit, p_src, _ = _asymmetric_from_state(model, state, x, t, t_prev, delta, schedule)
                traj.pred_x0[t] = p_edit
                traj.pred_src[t] = p_src
            else:
                eta = 1.0 if plan.is_stochastic_step(t, t_prev) else 0.0
                eps = _eps_at(model, x, t)
                dec = decompose_step(x, eps, t, t_prev, schedule, eta)
                x = math.sqrt(schedule.alpha_bar(t_prev)) * dec.p_term + dec.d_term
                if dec.sigma > 0.0:
                    if rng is None:
                        raise ValueError("stochastic phase requires an rng")
                    x = x + dec.sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype)
                traj.pred_x0[t] = dec.p_term
            traj.append(t_prev, x)
    return traj
