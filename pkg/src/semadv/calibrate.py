"""Locating the editing and noise-boost boundaries on the timestep plan.

The three-phase sampler needs two markers: ``t_edit``, below which bottleneck
injection stops, and ``t_boost``, below which stochastic steps take over.
Both are found by scanning perceptual-distance trajectories measured on a
small probe set:

* ``t_edit`` — scan the distance between each probe image and the
  trajectory's predicted clean image P_t on the *uninjected* source rollout.
  The first timestep (from the top) where the mean distance falls to the
  threshold closes the editing interval. The threshold shrinks with the
  semantic gap between the source and target prompts: near-identical prompts
  keep the full budget, orthogonal prompts drive it to zero (an edit that
  changes everything needs the whole trajectory, so calibration fails loudly
  instead).
* ``t_boost`` — the same scan on the distance between each probe and its
  noised version x_t along the deterministic inversion path. The first
  timestep (from the top) at or below the threshold marks how much of the
  tail can be re-noised without visible content change.

The default thresholds (0.33 and 1.2) assume a learned perceptual metric
with a known scale. The desk-scale metric — channel-normalized L2 distance
over the desk classifier's intermediate feature maps — has its own scale, so
both finders also accept ``mode="span"``, where the threshold value is read
as a fraction of the observed trajectory range instead of an absolute
distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Protocol, Sequence, Tuple, runtime_checkable

import torch
from torch import Tensor

from .losses import EncoderPair, text_cosine
from .sampler import TimestepPlan, ddim_generate, ddim_invert
from .schedule import NoiseSchedule
from .unet import ToyUNet

__all__ = [
    "PerceptualDistance",
    "ClassifierPerceptualDistance",
    "DistanceTrajectory",
    "ThresholdUnreachableError",
    "prediction_distance_trajectory",
    "noising_distance_trajectory",
    "select_t_edit",
    "select_t_boost",
    "find_t_edit",
    "find_t_boost",
    "CalibrationReport",
    "calibrate_markers",
    "combined_t_edit",
]

_MODES = ("absolute", "span")


@runtime_checkable
class PerceptualDistance(Protocol):
    """Per-sample image distance: nonnegative, symmetric, zero at identity."""

    def __call__(self, x: Tensor, y: Tensor) -> Tensor: ...


class ClassifierPerceptualDistance:
    """Feature-space distance built from a classifier's intermediate maps.

    At every layer the feature vectors are unit-normalized across channels at
    each spatial site; the distance is the squared L2 gap of these normalized
    features, averaged over space and summed over layers. By construction it
    is symmetric, nonnegative, and exactly zero for identical inputs.
    """

    def __init__(self, classifier, eps: float = 1e-10):
        if not hasattr(classifier, "feature_maps"):
            raise TypeError("classifier must expose feature_maps(images)")
        self.classifier = classifier
        self.eps = eps

    @staticmethod
    def _unit(features: Tensor, eps: float) -> Tensor:
        norm = features.pow(2).sum(dim=1, keepdim=True).sqrt()
        return features / (norm + eps)

    def __call__(self, x: Tensor, y: Tensor) -> Tensor:
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        with torch.no_grad():
            maps_x = self.classifier.feature_maps(x)
            maps_y = self.classifier.feature_maps(y)
            total = torch.zeros(x.shape[0], dtype=x.dtype)
            for fx, fy in zip(maps_x, maps_y):
                diff = self._unit(fx, self.eps) - self._unit(fy, self.eps)
                total = total + diff.pow(2).sum(dim=1).mean(dim=(1, 2))
        return total


@dataclass(frozen=True)
class DistanceTrajectory:
    """Mean probe distance at each plan timestep (ascending); plot-ready."""

    timesteps: Tuple[int, ...]
    values: Tuple[float, ...]

    def __post_init__(self) -> None:
        ts = tuple(int(t) for t in self.timesteps)
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "values", vals)
        if len(ts) != len(vals) or not ts:
            raise ValueError("timesteps and values must be nonempty and aligned")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timesteps must be strictly increasing")
        bad = [v for v in vals if not (v == v and abs(v) != float("inf")) or v < 0.0]
        if bad:
            raise ValueError(f"distances must be finite and nonnegative, got {bad[:3]}")

    @property
    def low(self) -> float:
        return min(self.values)

    @property
    def high(self) -> float:
        return max(self.values)

    def span_threshold(self, fraction: float) -> float:
        """Absolute threshold at a fraction of the observed [low, high] range."""
        return self.low + fraction * (self.high - self.low)

    def rows(self):
        """(timestep, value) pairs, ascending — the plot-ready table."""
        return list(zip(self.timesteps, self.values))


class ThresholdUnreachableError(RuntimeError):
    """No timestep satisfies the calibration threshold; carries the scan."""

    def __init__(self, message: str, trajectory: DistanceTrajectory):
        super().__init__(f"{message}; trajectory: {trajectory.rows()}")
        self.trajectory = trajectory


def _mean_distance(pd: PerceptualDistance, probes: Tensor, other: Tensor) -> float:
    d = pd(probes, other)
    return float(torch.as_tensor(d, dtype=torch.float64).mean())


def prediction_distance_trajectory(
    model: ToyUNet,
    schedule: NoiseSchedule,
    probe_images: Tensor,
    plan: TimestepPlan,
    pd: PerceptualDistance,
) -> DistanceTrajectory:
    """Mean pd(probe, P_t) along the uninjected regeneration of the probes.

    Probes are inverted to x_T first, then regenerated deterministically; P_t
    is the predicted clean image at each source timestep of that rollout.
    """
    _validate_probes(probe_images)
    x_T = ddim_invert(model, schedule, probe_images, plan)
    traj = ddim_generate(model, schedule, x_T, plan, eta=0.0)
    ts = sorted(traj.pred_x0)
    values = [_mean_distance(pd, probe_images, traj.pred_x0[t]) for t in ts]
    return DistanceTrajectory(timesteps=tuple(ts), values=tuple(values))


def noising_distance_trajectory(
    model: ToyUNet,
    schedule: NoiseSchedule,
    probe_images: Tensor,
    plan: TimestepPlan,
    pd: PerceptualDistance,
) -> DistanceTrajectory:
    """Mean pd(probe, x_t) along the deterministic noising of the probes."""
    _validate_probes(probe_images)
    _, traj = ddim_invert(model, schedule, probe_images, plan, return_trajectory=True)
    values = [_mean_distance(pd, probe_images, traj.x_at(t)) for t in plan.tau]
    return DistanceTrajectory(timesteps=plan.tau, values=tuple(values))


def _validate_probes(probe_images: Tensor) -> None:
    if probe_images.dim() != 4 or probe_images.shape[0] < 1:
        raise ValueError("probe set must be a nonempty (B, C, H, W) batch")


def select_t_edit(trajectory: DistanceTrajectory, threshold: float) -> int:
    """First timestep from the top whose value is at or below the threshold.

    Trajectories need not be monotone; the scan simply takes the first
    satisfaction walking downward. No fallback exists: if the threshold is
    never met the editing boundary is undefined and an error carries the
    trajectory out for inspection.
    """
    for t, v in reversed(trajectory.rows()):
        if v <= threshold:
            return t
    raise ThresholdUnreachableError(
        f"no timestep reaches prediction distance <= {threshold:.6g}", trajectory
    )


def select_t_boost(trajectory: DistanceTrajectory, threshold: float) -> int:
    """Noise-boost boundary: first timestep from the top at or below threshold.

    Two degenerate cases: a trajectory entirely at or below the threshold has
    no crossing at all (the threshold carries no information) and errors out;
    a trajectory that never comes down to the threshold falls back to the
    smallest plan timestep, leaving the stochastic phase empty.
    """
    if all(v <= threshold for v in trajectory.values):
        raise ThresholdUnreachableError(
            f"noising distances never exceed {threshold:.6g}; no crossing exists",
            trajectory,
        )
    for t, v in reversed(trajectory.rows()):
        if v <= threshold:
            return t
    return trajectory.timesteps[0]


def _resolve_threshold(trajectory: DistanceTrajectory, value: float, mode: str) -> float:
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}, got {mode!r}")
    return trajectory.span_threshold(value) if mode == "span" else value


def find_t_edit(
    model: ToyUNet,
    schedule: NoiseSchedule,
    probe_images: Tensor,
    spec,
    pair: EncoderPair,
    pd: PerceptualDistance,
    plan: TimestepPlan,
    base_threshold: float = 0.33,
    mode: str = "absolute",
) -> int:
    """Editing boundary for one attribute, adapted to its prompt similarity.

    The effective threshold is ``base_threshold`` scaled down by the cosine
    between the source and target prompt embeddings (equivalently, reduced by
    a margin proportional to their cosine distance): similar prompts keep a
    generous threshold and a short editing interval, while dissimilar prompts
    push the boundary deeper into the trajectory. In ``span`` mode
    ``base_threshold`` is a fraction of the observed trajectory range.
    """
    cos = text_cosine(pair, spec.source_text, spec.target_text)
    trajectory = prediction_distance_trajectory(model, schedule, probe_images, plan, pd)
    effective = _resolve_threshold(trajectory, base_threshold * cos, mode)
    return select_t_edit(trajectory, effective)


def find_t_boost(
    model: ToyUNet,
    schedule: NoiseSchedule,
    probe_images: Tensor,
    pd: PerceptualDistance,
    plan: TimestepPlan,
    threshold: float = 1.2,
    mode: str = "absolute",
) -> int:
    """Noise-boost boundary from the probes' noising trajectory."""
    trajectory = noising_distance_trajectory(model, schedule, probe_images, plan, pd)
    effective = _resolve_threshold(trajectory, threshold, mode)
    return select_t_boost(trajectory, effective)


def combined_t_edit(per_attribute: Dict[str, int]) -> int:
    """Joint editing boundary for a multi-attribute attack.

    Each attribute edits over [t_edit, T]; the attack needs the union of
    those intervals, i.e. the smallest per-attribute boundary.
    """
    if not per_attribute:
        raise ValueError("need at least one attribute boundary")
    return min(per_attribute.values())


@dataclass(frozen=True)
class CalibrationReport:
    """Markers plus the trajectories they were read from (plot-ready)."""

    t_edit: Dict[str, int]
    t_boost: int
    prediction_trajectory: DistanceTrajectory
    noising_trajectory: DistanceTrajectory
    edit_thresholds: Dict[str, float]
    boost_threshold: float

    @property
    def joint_t_edit(self) -> int:
        return combined_t_edit(self.t_edit)

    def marked_plan(self, plan: TimestepPlan) -> TimestepPlan:
        return plan.with_markers(t_edit=self.joint_t_edit, t_boost=self.t_boost)


def calibrate_markers(
    model: ToyUNet,
    schedule: NoiseSchedule,
    probe_images: Tensor,
    attribute_specs: Sequence,
    pair: EncoderPair,
    pd: PerceptualDistance,
    plan: TimestepPlan,
    edit_threshold: float = 0.33,
    boost_threshold: float = 1.2,
    mode: str = "absolute",
) -> CalibrationReport:
    """Full calibration pass: both trajectories once, one t_edit per attribute.

    The trajectories depend only on the model and the probes, so they are
    computed a single time and every attribute's prompt-adapted threshold is
    applied to the shared prediction trajectory.
    """
    if not attribute_specs:
        raise ValueError("need at least one attribute to calibrate")
    prediction = prediction_distance_trajectory(model, schedule, probe_images, plan, pd)
    noising = noising_distance_trajectory(model, schedule, probe_images, plan, pd)

    edits: Dict[str, int] = {}
    thresholds: Dict[str, float] = {}
    for spec in attribute_specs:
        cos = text_cosine(pair, spec.source_text, spec.target_text)
        effective = _resolve_threshold(prediction, edit_threshold * cos, mode)
        edits[spec.name] = select_t_edit(prediction, effective)
        thresholds[spec.name] = effective

    boost_effective = _resolve_threshold(noising, boost_threshold, mode)
    t_boost = select_t_boost(noising, boost_effective)
    return CalibrationReport(
        t_edit=edits,
        t_boost=t_boost,
        prediction_trajectory=prediction,
        noising_trajectory=noising,
        edit_thresholds=thresholds,
        boost_threshold=boost_effective,
    )
