"""Tests for perceptual-distance trajectories and marker calibration."""

from __future__ import annotations

import pytest
import torch

from semadv.calibrate import (
    CalibrationReport,
    ClassifierPerceptualDistance,
    DistanceTrajectory,
    PerceptualDistance,
    ThresholdUnreachableError,
    calibrate_markers,
    combined_t_edit,
    find_t_boost,
    find_t_edit,
    noising_distance_trajectory,
    prediction_distance_trajectory,
    select_t_boost,
    select_t_edit,
)
from semadv.classifiers import ConvClassifier
from semadv.losses import DegenerateDirectionError
from semadv.sampler import uniform_plan
from semadv.semantic import AttributeSpec


class L1Distance:
    """Minimal PerceptualDistance: per-sample mean absolute difference."""

    def __call__(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return (x - y).abs().mean(dim=(1, 2, 3))


class VocabPair:
    """Stub encoder pair with a fixed text-embedding table."""

    def __init__(self, table):
        self.table = {k: torch.as_tensor(v, dtype=torch.float64) for k, v in table.items()}

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        return images.reshape(images.shape[0], -1).to(torch.float64)

    def embed_text(self, text: str) -> torch.Tensor:
        return self.table[text]


def probe_batch(n=2, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, 1, size, size), generator=g) * 1.4 - 0.7


class TestClassifierPerceptualDistance:
    def setup_method(self):
        torch.manual_seed(11)
        self.pd = ClassifierPerceptualDistance(ConvClassifier())
        self.x = probe_batch(3, 16, seed=1)
        self.y = probe_batch(3, 16, seed=2)

    def test_identity_exactly_zero(self):
        d = self.pd(self.x, self.x)
        assert torch.equal(d, torch.zeros_like(d))

    def test_symmetric(self):
        assert torch.allclose(self.pd(self.x, self.y), self.pd(self.y, self.x))

    def test_nonnegative_finite_per_sample(self):
        d = self.pd(self.x, self.y)
        assert d.shape == (3,)
        assert torch.isfinite(d).all()
        assert (d >= 0).all()
        assert (d > 0).all()  # distinct random images should not collide

    def test_satisfies_protocol(self):
        assert isinstance(self.pd, PerceptualDistance)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            self.pd(self.x, self.y[:2])

    def test_requires_feature_maps(self):
        with pytest.raises(TypeError):
            ClassifierPerceptualDistance(torch.nn.Linear(4, 4))


class TestDistanceTrajectory:
    def test_validation(self):
        with pytest.raises(ValueError):
            DistanceTrajectory(timesteps=(), values=())
        with pytest.raises(ValueError):
            DistanceTrajectory(timesteps=(0, 1), values=(0.1,))
        with pytest.raises(ValueError):
            DistanceTrajectory(timesteps=(1, 0), values=(0.1, 0.2))
        with pytest.raises(ValueError):
            DistanceTrajectory(timesteps=(0, 1), values=(0.1, -0.2))
        with pytest.raises(ValueError):
            DistanceTrajectory(timesteps=(0, 1), values=(0.1, float("nan")))

    def test_span_threshold(self):
        traj = DistanceTrajectory(timesteps=(0, 5, 10), values=(0.2, 0.4, 1.0))
        assert traj.low == 0.2
        assert traj.high == 1.0
        assert traj.span_threshold(0.0) == pytest.approx(0.2)
        assert traj.span_threshold(1.0) == pytest.approx(1.0)
        assert traj.span_threshold(0.5) == pytest.approx(0.6)

    def test_rows_ascending(self):
        traj = DistanceTrajectory(timesteps=(0, 5), values=(0.0, 1.0))
        assert traj.rows() == [(0, 0.0), (5, 1.0)]


class TestSelectTEdit:
    def test_first_satisfaction_from_top(self):
        traj = DistanceTrajectory(timesteps=(0, 10, 20, 30), values=(0.1, 0.2, 0.5, 0.9))
        assert select_t_edit(traj, 0.33) == 10
        assert select_t_edit(traj, 0.5) == 20  # equality counts

    def test_non_monotone_takes_first_from_top(self):
        traj = DistanceTrajectory(timesteps=(0, 10, 20, 30), values=(0.1, 0.4, 0.2, 0.9))
        assert select_t_edit(traj, 0.33) == 20

    def test_unreachable_carries_trajectory(self):
        traj = DistanceTrajectory(timesteps=(0, 10), values=(0.5, 0.9))
        with pytest.raises(ThresholdUnreachableError) as exc:
            select_t_edit(traj, 0.33)
        assert exc.value.trajectory is traj


class TestSelectTBoost:
    def test_crossing_from_top(self):
        traj = DistanceTrajectory(timesteps=(0, 10, 20, 30), values=(0.0, 0.8, 1.5, 2.0))
        assert select_t_boost(traj, 1.2) == 10
        assert select_t_boost(traj, 1.5) == 20

    def test_zero_threshold_returns_smallest(self):
        traj = DistanceTrajectory(timesteps=(0, 10, 20), values=(0.0, 0.8, 1.5))
        assert select_t_boost(traj, 0.0) == 0

    def test_never_descending_to_threshold_falls_back_to_smallest(self):
        traj = DistanceTrajectory(timesteps=(0, 10, 20), values=(0.2, 0.8, 1.5))
        assert select_t_boost(traj, 0.1) == 0

    def test_entirely_below_threshold_unreachable(self):
        traj = DistanceTrajectory(timesteps=(0, 10, 20), values=(0.0, 0.8, 1.5))
        with pytest.raises(ThresholdUnreachableError):
            select_t_boost(traj, 2.0)


class TestTrajectoriesOnModel:
    def test_noising_starts_exactly_at_zero(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        traj = noising_distance_trajectory(small_model, small_sched, probe_batch(), plan, L1Distance())
        assert traj.timesteps == plan.tau
        assert traj.values[0] == 0.0
        assert max(traj.values) > 0.0

    def test_prediction_covers_source_timesteps(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        traj = prediction_distance_trajectory(small_model, small_sched, probe_batch(), plan, L1Distance())
        assert traj.timesteps == plan.tau[1:]

    def test_deterministic(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 5)
        a = noising_distance_trajectory(small_model, small_sched, probe_batch(), plan, L1Distance())
        b = noising_distance_trajectory(small_model, small_sched, probe_batch(), plan, L1Distance())
        assert a == b

    def test_probe_validation(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 5)
        with pytest.raises(ValueError):
            noising_distance_trajectory(small_model, small_sched, torch.zeros((1, 16, 16)), plan, L1Distance())


UNIT = [1.0, 0.0]
ORTHO = [0.0, 1.0]


class TestFinders:
    def make_pair(self):
        return VocabPair({"same a": UNIT, "same b": UNIT, "other": ORTHO, "null": [0.0, 0.0]})

    def test_identical_embeddings_keep_full_threshold(self, small_model, small_sched):
        # cos = 1 makes the margin vanish; a huge base threshold is then met
        # at the very top of the scan.
        plan = uniform_plan(small_sched.T, 6)
        spec = AttributeSpec(name="a", source_text="same a", target_text="same b")
        t = find_t_edit(
            small_model, small_sched, probe_batch(), spec, self.make_pair(), L1Distance(), plan,
            base_threshold=1e6,
        )
        assert t == plan.tau[-1]

    def test_orthogonal_embeddings_unreachable(self, small_model, small_sched):
        # cos = 0 drives the effective threshold to zero, unreachable on any
        # trajectory with strictly positive distances.
        plan = uniform_plan(small_sched.T, 6)
        spec = AttributeSpec(name="a", source_text="same a", target_text="other")
        with pytest.raises(ThresholdUnreachableError):
            find_t_edit(
                small_model, small_sched, probe_batch(), spec, self.make_pair(), L1Distance(), plan
            )

    def test_zero_norm_embedding_rejected(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        spec = AttributeSpec(name="a", source_text="same a", target_text="null")
        with pytest.raises(DegenerateDirectionError):
            find_t_edit(
                small_model, small_sched, probe_batch(), spec, self.make_pair(), L1Distance(), plan
            )

    def test_boost_zero_threshold_smallest_plan_timestep(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        t = find_t_boost(small_model, small_sched, probe_batch(), L1Distance(), plan, threshold=0.0)
        assert t == plan.tau[0] == 0

    def test_boost_threshold_above_maximum_unreachable(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        with pytest.raises(ThresholdUnreachableError):
            find_t_boost(small_model, small_sched, probe_batch(), L1Distance(), plan, threshold=1e9)

    def test_span_mode_returns_plan_member(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        t = find_t_boost(
            small_model, small_sched, probe_batch(), L1Distance(), plan, threshold=0.5, mode="span"
        )
        assert t in plan.tau

    def test_mode_validated(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        with pytest.raises(ValueError):
            find_t_boost(
                small_model, small_sched, probe_batch(), L1Distance(), plan, mode="relative"
            )


class TestCalibrateMarkers:
    def test_report_contents(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        pair = VocabPair({"src": UNIT, "tgt": [0.8, 0.6], "far": [0.6, 0.8]})
        specs = [
            AttributeSpec(name="near", source_text="src", target_text="tgt"),
            AttributeSpec(name="far", source_text="src", target_text="far"),
        ]
        report = calibrate_markers(
            small_model, small_sched, probe_batch(), specs, pair, L1Distance(), plan,
            edit_threshold=1e6, boost_threshold=0.0,
        )
        assert set(report.t_edit) == {"near", "far"}
        assert report.t_boost == 0
        assert set(report.edit_thresholds) == {"near", "far"}
        # prompt pairs with higher cosine keep a larger effective threshold
        assert report.edit_thresholds["near"] > report.edit_thresholds["far"]
        assert report.prediction_trajectory.timesteps == plan.tau[1:]
        assert report.noising_trajectory.timesteps == plan.tau
        assert report.joint_t_edit == min(report.t_edit.values())

    def test_marked_plan_applies_markers(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        report = CalibrationReport(
            t_edit={"a": plan.tau[-2]},
            t_boost=plan.tau[1],
            prediction_trajectory=DistanceTrajectory((0,), (0.0,)),
            noising_trajectory=DistanceTrajectory((0,), (0.0,)),
            edit_thresholds={"a": 0.3},
            boost_threshold=1.2,
        )
        marked = report.marked_plan(plan)
        assert marked.t_edit == plan.tau[-2]
        assert marked.t_boost == plan.tau[1]

    def test_empty_attribute_list_rejected(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        with pytest.raises(ValueError):
            calibrate_markers(
                small_model, small_sched, probe_batch(), [], VocabPair({}), L1Distance(), plan
            )


def test_combined_t_edit():
    assert combined_t_edit({"a": 30, "b": 18}) == 18
    with pytest.raises(ValueError):
        combined_t_edit({})
