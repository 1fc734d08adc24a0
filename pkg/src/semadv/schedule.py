"""Closed-form diffusion coefficients and single-step sampling primitives.

Timesteps are 1-based: t runs over [1, T] and alpha_bar(0) := 1, so steps that
land on t=0 stay well-defined. All image tensors are channel-first floats in
[-1, 1]; the helpers below only ever scale and add, so they accept torch
tensors and numpy arrays alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateStepError(ValueError):
    """Raised when a step's variance formula divides by zero (alpha_bar == 1)."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta schedule plus its cumulative alpha products.

    betas[i] holds beta_{i+1}; alpha_bars[i] holds alpha_bar_{i+1}. Use
    alpha_bar(t) for 1-based access with the alpha_bar(0) = 1 convention.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def describe(self) -> dict:
        """Plain-data descriptor for checkpoints and manifests."""
        return {
            "kind": "linear",
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }

    @staticmethod
    def from_descriptor(desc: dict) -> "NoiseSchedule":
        if desc.get("kind") != "linear":
            raise ValueError(f"unknown schedule kind {desc.get('kind')!r}")
        return build_linear_schedule(desc["T"], desc["beta_start"], desc["beta_end"])


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas, endpoints inclusive."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T), alpha_bars=None)


def build_cosine_schedule(T: int, offset: float = 0.008) -> NoiseSchedule:
    """Cosine alpha_bar curve, expressed through its per-step betas."""
    if T < 2:
        raise ValueError("T must be >= 2")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    return NoiseSchedule(betas=betas, alpha_bars=None)


def forward_diffuse(x0, t: int, noise, schedule: NoiseSchedule):
    """Closed-form marginal: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


def predict_x0(x_t, eps, t: int, schedule: NoiseSchedule):
    """Invert the closed form at t given a noise estimate."""
    abar = schedule.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)


def sigma_t(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """Step noise scale; eta=0 is deterministic, eta=1 matches ancestral sampling."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    if abar_t >= 1.0:
        raise DegenerateStepError(f"alpha_bar({t}) = 1 makes the variance undefined")
    return eta * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * math.sqrt(1.0 - abar_t / abar_prev)


@dataclass(frozen=True)
class StepDecomposition:
    """The predicted-x0 and direction terms of one reverse step.

    Recombines as sqrt(abar_prev) * p_term + d_term + sigma * z.
    """

    p_term: object
    d_term: object
    sigma: float


def decompose_step(x_t, eps, t: int, t_prev: int, schedule: NoiseSchedule, eta: float) -> StepDecomposition:
    sig = sigma_t(schedule, t, t_prev, eta)
    abar_prev = schedule.alpha_bar(t_prev)
    p = predict_x0(x_t, eps, t, schedule)
    d = math.sqrt(1.0 - abar_prev - sig * sig) * eps
    return StepDecomposition(p_term=p, d_term=d, sigma=sig)


def ddim_step(x_t, eps, t: int, t_prev: int, schedule: NoiseSchedule, eta: float, z=None):
    """One reverse step t -> t_prev from a noise estimate.

    z is required when eta > 0 and ignored when eta == 0, keeping the eta=0
    path free of any RNG interaction.
    """
    dec = decompose_step(x_t, eps, t, t_prev, schedule, eta)
    abar_prev = schedule.alpha_bar(t_prev)
    out = math.sqrt(abar_prev) * dec.p_term + dec.d_term
    if dec.sigma > 0.0:
        if z is None:
            raise ValueError("eta > 0 requires a noise draw z")
        out = out + dec.sigma * z
    return out
