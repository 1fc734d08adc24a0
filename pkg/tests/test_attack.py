"""Tests for the weight-optimization attack loop and the line-search baseline."""

from __future__ import annotations

import json

import pytest
import torch

from semadv.attack import (
    AttackConfig,
    AttackResult,
    NonFiniteLossError,
    WeightTable,
    mean_abs_weight,
    run_attack,
    single_attribute_line_search,
)
from semadv.losses import LossWeights, prepare_classifier_input
from semadv.sampler import three_phase_generate, uniform_plan
from semadv.semantic import AttributeSet, AttributeSpec, SemanticFunction
from semadv.unet import state_dict_digest

BOTTLENECK = (32, 4, 4)  # matches the shared small test model


class LinearProbe(torch.nn.Module):
    """Differentiable 2-class stub classifier."""

    def __init__(self, size=32, seed=1):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w = torch.nn.Parameter(torch.randn((2, size * size), generator=g) / size)
        self.w.requires_grad_(False)

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.w.T


class FixedProbe(torch.nn.Module):
    """Always emits the same logits (differentiably, via a zero input term)."""

    def __init__(self, logits):
        super().__init__()
        self.logits = torch.tensor([logits], dtype=torch.float32)

    def forward(self, x):
        anchor = x.reshape(x.shape[0], -1).sum(dim=1, keepdim=True) * 0.0
        return self.logits.expand(x.shape[0], -1) + anchor


class DriftProbe(torch.nn.Module):
    """Says class 1 once the input drifts far enough from a reference image."""

    def __init__(self, reference, threshold=0.05, gain=100.0):
        super().__init__()
        self.reference = reference.detach().clone()
        self.threshold = threshold
        self.gain = gain

    def forward(self, x):
        drift = (x - self.reference).abs().mean(dim=(1, 2, 3), keepdim=False)
        score = (drift - self.threshold) * self.gain
        return torch.stack([-score, score], dim=1)


class NanProbe(torch.nn.Module):
    def forward(self, x):
        flat = x.reshape(x.shape[0], -1).sum(dim=1, keepdim=True)
        return torch.cat([flat, flat * float("nan")], dim=1)


def zero_attrs(n=2, max_timestep=60):
    torch.manual_seed(99)  # the hidden layer draws from the global generator
    items = []
    for i in range(n):
        spec = AttributeSpec(name=f"attr{i}", source_text=f"src {i}", target_text=f"tar {i}")
        items.append((spec, SemanticFunction(BOTTLENECK, max_timestep=max_timestep)))
    return AttributeSet(items)


def live_attrs(n=2, max_timestep=60, scale=0.3, seed=7):
    attrs = zero_attrs(n, max_timestep)
    for i, fn in enumerate(attrs.functions):
        fn.randomize_output_layer(scale, seed + i)
    return attrs


def marked_plan(sched, s=6):
    plan = uniform_plan(sched.T, s)
    # two editing steps at the top, one stochastic step at the bottom
    return plan.with_markers(t_edit=plan.tau[-3], t_boost=plan.tau[1])


def start_noise(model, seed=11):
    g = torch.Generator().manual_seed(seed)
    return torch.randn((1, 1, model.image_size, model.image_size), generator=g)


def make_table(values, timesteps=(50, 40), tying="per_timestep"):
    return WeightTable(
        values=torch.tensor(values, dtype=torch.float32),
        editing_timesteps=timesteps,
        tying=tying,
    )


def result_with_table(table):
    return AttackResult(
        success=False,
        x_0=torch.zeros((1, 4, 4)),
        weights=table,
        iterations_used=1,
        mean_abs_weight=float(table.as_matrix().abs().mean()),
        loss_trace=[0.0],
        y_target=1,
        y_source=0,
    )


class TestWeightTable:
    def test_initial_shapes(self):
        g = torch.Generator().manual_seed(0)
        per = WeightTable.initial(3, (50, 40), "per_timestep", g)
        assert per.values.shape == (3, 2)
        shared = WeightTable.initial(3, (50, 40), "shared", torch.Generator().manual_seed(0))
        assert shared.values.shape == (3, 1)
        assert shared.as_matrix().shape == (3, 2)

    def test_initial_seeded(self):
        a = WeightTable.initial(2, (50, 40), "per_timestep", torch.Generator().manual_seed(3))
        b = WeightTable.initial(2, (50, 40), "per_timestep", torch.Generator().manual_seed(3))
        assert torch.equal(a.values, b.values)

    def test_column_lookup(self):
        table = make_table([[1.0, 2.0], [3.0, 4.0]])
        assert torch.equal(table.column(50), torch.tensor([1.0, 3.0]))
        assert torch.equal(table.column(40), torch.tensor([2.0, 4.0]))
        shared = make_table([[5.0], [6.0]], tying="shared")
        assert torch.equal(shared.column(50), shared.column(40))

    def test_validation(self):
        with pytest.raises(ValueError):
            make_table([[float("inf"), 0.0]])
        with pytest.raises(ValueError):
            make_table([[1.0, 2.0, 3.0]])  # three columns, two timesteps
        with pytest.raises(ValueError):
            make_table([[1.0, 2.0]], tying="weird")
        with pytest.raises(ValueError):
            WeightTable(values=torch.zeros((2, 1)), editing_timesteps=(), tying="shared")

    def test_shared_expansion_mean(self):
        shared = make_table([[2.0], [-4.0]], tying="shared")
        assert float(shared.as_matrix().abs().mean()) == pytest.approx(3.0)


class TestMeanAbsWeight:
    def test_zero_table(self):
        assert mean_abs_weight(result_with_table(make_table([[0.0, 0.0]]))) == 0.0

    def test_signed_entries(self):
        res = result_with_table(make_table([[1.0, -2.0], [3.0, -4.0]]))
        assert mean_abs_weight(res) == pytest.approx(2.5)

    def test_shared_column(self):
        res = result_with_table(make_table([[-1.5]], tying="shared"))
        assert mean_abs_weight(res) == pytest.approx(1.5)

    def test_matches_manual_on_random(self):
        g = torch.Generator().manual_seed(9)
        values = torch.randn((4, 3), generator=g)
        res = result_with_table(
            WeightTable(values=values, editing_timesteps=(50, 40, 30), tying="per_timestep")
        )
        manual = float(sum(abs(float(v)) for v in values.flatten()) / values.numel())
        assert mean_abs_weight(res) == pytest.approx(manual, rel=1e-6)
        assert res.mean_abs_weight == pytest.approx(manual, rel=1e-6)


class TestAttackConfig:
    def test_defaults(self):
        cfg = AttackConfig()
        assert cfg.iterations == 40
        assert cfg.loss_weights.lambda_1 == 1.0
        assert cfg.loss_weights.lambda_2 == 10.0
        assert cfg.gradient_source == "p_t"
        assert cfg.weight_tying == "per_timestep"
        assert cfg.post_update_transition

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(iterations=0),
            dict(lr=0.0),
            dict(lr=float("inf")),
            dict(gradient_source="h"),
            dict(weight_tying="none"),
            dict(adaptive_eps=0.0),
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            AttackConfig(**kwargs)


class TestRunAttackBasics:
    def test_empty_attribute_set_rejected(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        with pytest.raises(ValueError, match="at least one attribute"):
            run_attack(
                small_model, small_sched, AttributeSet([]), LinearProbe(), LinearProbe(seed=2),
                1, 0, start_noise(small_model), plan, AttackConfig(iterations=1),
            )

    def test_plan_needs_markers(self, small_model, small_sched):
        plan = uniform_plan(small_sched.T, 6)
        with pytest.raises(ValueError, match="markers"):
            run_attack(
                small_model, small_sched, zero_attrs(), LinearProbe(), LinearProbe(seed=2),
                1, 0, start_noise(small_model), plan, AttackConfig(iterations=1),
            )

    def test_single_sample_required(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x = torch.randn((2, 1, 32, 32))
        with pytest.raises(ValueError, match="single"):
            run_attack(
                small_model, small_sched, zero_attrs(), LinearProbe(), LinearProbe(seed=2),
                1, 0, x, plan, AttackConfig(iterations=1),
            )

    def test_zero_functions_reproduce_plain_sample(self, small_model, small_sched):
        """With all-zero attribute outputs the rollout is the unedited sample."""
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        f = LinearProbe(seed=1)
        cfg = AttackConfig(iterations=1, seed=3)
        result = run_attack(
            small_model, small_sched, zero_attrs(), f, LinearProbe(seed=2),
            1, 0, x_T, plan, cfg,
        )
        rng = torch.Generator().manual_seed(cfg.seed + 1)
        plain = three_phase_generate(
            small_model, small_sched, x_T, plan,
            lambda h, t: torch.zeros_like(h), rng=rng,
        )
        assert torch.equal(result.x_0, plain.x0[0])
        with torch.no_grad():
            pred = int(f(prepare_classifier_input(plain.x0)).argmax(dim=1))
        assert result.success == (pred == 1)

    def test_success_flag_matches_stored_image(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        f = LinearProbe(seed=1)
        result = run_attack(
            small_model, small_sched, live_attrs(), f, LinearProbe(seed=2),
            1, 0, start_noise(small_model), plan, AttackConfig(iterations=2, seed=0),
        )
        with torch.no_grad():
            pred = int(f(prepare_classifier_input(result.x_0.unsqueeze(0))).argmax(dim=1))
        assert result.success == (pred == 1)

    def test_early_return_on_immediate_success(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        result = run_attack(
            small_model, small_sched, live_attrs(), FixedProbe([0.0, 5.0]), LinearProbe(seed=2),
            1, 0, start_noise(small_model), plan, AttackConfig(iterations=5, seed=0),
        )
        assert result.success
        assert result.iterations_used == 1
        assert len(result.loss_trace) == 1

    def test_failure_uses_full_budget(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        result = run_attack(
            small_model, small_sched, live_attrs(), FixedProbe([5.0, 0.0]), LinearProbe(seed=2),
            1, 0, start_noise(small_model), plan, AttackConfig(iterations=3, seed=0),
        )
        assert not result.success
        assert result.iterations_used == 3
        assert len(result.loss_trace) == 3

    def test_weights_persist_across_iterations(self, small_model, small_sched):
        """More budget keeps shrinking the same table under the L1 penalty.

        With zero attribute outputs the image path contributes no gradient, so
        each iteration applies pure penalty shrinkage to the same persisted
        weights; a longer run must end with a smaller table than a short one.
        """
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        never = FixedProbe([5.0, 0.0])

        def run(k):
            return run_attack(
                small_model, small_sched, zero_attrs(), never, LinearProbe(seed=2),
                1, 0, x_T, plan,
                AttackConfig(iterations=k, seed=4, lr=0.05),
            )

        short, long = run(1), run(3)
        assert long.mean_abs_weight < short.mean_abs_weight

    def test_loss_decreases_with_opposing_probes(self, small_model, small_sched):
        """The optimizer makes progress on a drift-based target classifier."""
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        rng = torch.Generator().manual_seed(1)
        plain = three_phase_generate(
            small_model, small_sched, x_T, plan, lambda h, t: torch.zeros_like(h), rng=rng
        )
        f = DriftProbe(prepare_classifier_input(plain.x0), threshold=0.02, gain=30.0)
        result = run_attack(
            small_model, small_sched, live_attrs(), f, FixedProbe([5.0, 0.0]),
            1, 0, x_T, plan,
            AttackConfig(iterations=6, seed=0, lr=0.5, loss_weights=LossWeights(lambda_1=0.0, lambda_2=0.0)),
        )
        assert result.success or result.loss_trace[-1] < result.loss_trace[0]


class TestRunAttackVariants:
    def test_weight_tying_shapes(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        never = FixedProbe([5.0, 0.0])
        per = run_attack(
            small_model, small_sched, live_attrs(3), never, LinearProbe(seed=2),
            1, 0, x_T, plan, AttackConfig(iterations=1, seed=0),
        )
        assert per.weights.values.shape == (3, len(plan.editing_timesteps()))
        shared = run_attack(
            small_model, small_sched, live_attrs(3), never, LinearProbe(seed=2),
            1, 0, x_T, plan,
            AttackConfig(iterations=1, seed=0, weight_tying="shared"),
        )
        assert shared.weights.values.shape == (3, 1)
        assert shared.weights.as_matrix().shape == (3, len(plan.editing_timesteps()))

    def test_gradient_sources_differ(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        results = {}
        for source in ("p_t", "x_t"):
            results[source] = run_attack(
                small_model, small_sched, live_attrs(), FixedProbe([5.0, 0.0]),
                LinearProbe(seed=2), 1, 0, x_T, plan,
                AttackConfig(iterations=2, seed=0, gradient_source=source),
            )
        assert not torch.equal(results["p_t"].weights.values, results["x_t"].weights.values)

    def test_transition_weight_choice_differs(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        outs = {}
        for post in (True, False):
            outs[post] = run_attack(
                small_model, small_sched, live_attrs(scale=1.0), FixedProbe([5.0, 0.0]),
                LinearProbe(seed=2), 1, 0, x_T, plan,
                AttackConfig(iterations=1, seed=0, post_update_transition=post, lr=2.0),
            )
        assert not torch.equal(outs[True].x_0, outs[False].x_0)

    def test_deterministic_given_seed(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)

        def run():
            return run_attack(
                small_model, small_sched, live_attrs(), FixedProbe([5.0, 0.0]),
                LinearProbe(seed=2), 1, 0, x_T, plan,
                AttackConfig(iterations=2, seed=6),
            )

        a, b = run(), run()
        assert torch.equal(a.x_0, b.x_0)
        assert torch.equal(a.weights.values, b.weights.values)
        assert a.loss_trace == b.loss_trace

    def test_seed_changes_initial_weights(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)

        def run(seed):
            return run_attack(
                small_model, small_sched, live_attrs(), FixedProbe([5.0, 0.0]),
                LinearProbe(seed=2), 1, 0, x_T, plan,
                AttackConfig(iterations=1, seed=seed),
            )

        assert not torch.equal(run(0).weights.values, run(1).weights.values)

    def test_world_stays_frozen(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        attrs = live_attrs()
        f, g = LinearProbe(seed=1), LinearProbe(seed=2)
        digests = [
            state_dict_digest(small_model),
            state_dict_digest(f),
            state_dict_digest(g),
            *[state_dict_digest(fn) for fn in attrs.functions],
        ]
        run_attack(
            small_model, small_sched, attrs, f, g, 1, 0,
            start_noise(small_model), plan, AttackConfig(iterations=2, seed=0),
        )
        assert digests == [
            state_dict_digest(small_model),
            state_dict_digest(f),
            state_dict_digest(g),
            *[state_dict_digest(fn) for fn in attrs.functions],
        ]

    def test_nan_objective_aborts(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        with pytest.raises(NonFiniteLossError, match="objective"):
            run_attack(
                small_model, small_sched, live_attrs(), NanProbe(), LinearProbe(seed=2),
                1, 0, start_noise(small_model), plan, AttackConfig(iterations=1, seed=0),
            )

    def test_exploding_update_aborts(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        with pytest.raises(NonFiniteLossError, match="update"):
            run_attack(
                small_model, small_sched, live_attrs(), FixedProbe([5.0, 0.0]),
                LinearProbe(seed=2), 1, 0, start_noise(small_model), plan,
                AttackConfig(iterations=1, seed=0, lr=1e39),
            )

    def test_record_roundtrip(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        result = run_attack(
            small_model, small_sched, live_attrs(), LinearProbe(seed=1), LinearProbe(seed=2),
            1, 0, start_noise(small_model), plan, AttackConfig(iterations=1, seed=0),
        )
        record = json.loads(json.dumps(result.to_record()))
        assert record["success"] == result.success
        assert record["iterations_used"] == result.iterations_used
        assert record["mean_abs_weight"] == pytest.approx(result.mean_abs_weight)
        assert record["editing_timesteps"] == list(plan.editing_timesteps())
        assert torch.tensor(record["weights"]).shape == result.weights.values.shape


class TestLineSearch:
    def test_grid_validation(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        args = (small_model, small_sched, live_attrs(1), LinearProbe(), 1,
                start_noise(small_model), plan)
        with pytest.raises(ValueError, match="empty"):
            single_attribute_line_search(*args, [])
        with pytest.raises(ValueError, match="increasing"):
            single_attribute_line_search(*args, [0.0, 1.0, 1.0])
        with pytest.raises(ValueError, match="increasing"):
            single_attribute_line_search(*args, [2.0, 1.0])

    def test_exactly_one_attribute(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        with pytest.raises(ValueError, match="one attribute"):
            single_attribute_line_search(
                small_model, small_sched, live_attrs(2), LinearProbe(), 1,
                start_noise(small_model), plan, [0.0, 1.0],
            )

    def test_zero_weight_is_plain_sample(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        f = LinearProbe(seed=1)
        result = single_attribute_line_search(
            small_model, small_sched, live_attrs(1), f, 1, x_T, plan, [0.0], seed=2,
        )
        plain = three_phase_generate(
            small_model, small_sched, x_T, plan,
            lambda h, t: torch.zeros_like(h),
            rng=torch.Generator().manual_seed(2),
        )
        assert torch.equal(result.x_0, plain.x0[0])
        assert result.iterations_used == 1
        with torch.no_grad():
            pred = int(f(prepare_classifier_input(plain.x0)).argmax(dim=1))
        assert result.success == (pred == 1)

    def test_smallest_succeeding_weight_wins(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        plain = three_phase_generate(
            small_model, small_sched, x_T, plan,
            lambda h, t: torch.zeros_like(h),
            rng=torch.Generator().manual_seed(0),
        )
        f = DriftProbe(prepare_classifier_input(plain.x0), threshold=0.01)
        result = single_attribute_line_search(
            small_model, small_sched, live_attrs(1, scale=1.0), f, 1, x_T, plan,
            [0.0, 50.0, 200.0], seed=0,
        )
        assert result.success
        assert result.iterations_used == 2
        assert torch.all(result.weights.values == 50.0)
        assert result.mean_abs_weight == pytest.approx(50.0)

    def test_truncation_determinism(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        x_T = start_noise(small_model)
        plain = three_phase_generate(
            small_model, small_sched, x_T, plan,
            lambda h, t: torch.zeros_like(h),
            rng=torch.Generator().manual_seed(0),
        )
        f = DriftProbe(prepare_classifier_input(plain.x0), threshold=0.01)
        full_grid = [0.0, 50.0, 200.0, 800.0]
        full = single_attribute_line_search(
            small_model, small_sched, live_attrs(1, scale=1.0), f, 1, x_T, plan,
            full_grid, seed=0,
        )
        assert full.success
        truncated = single_attribute_line_search(
            small_model, small_sched, live_attrs(1, scale=1.0), f, 1, x_T, plan,
            full_grid[: full.iterations_used], seed=0,
        )
        assert torch.equal(full.x_0, truncated.x_0)
        assert torch.equal(full.weights.values, truncated.weights.values)
        assert full.loss_trace == truncated.loss_trace

    def test_failure_keeps_last_candidate(self, small_model, small_sched):
        plan = marked_plan(small_sched)
        result = single_attribute_line_search(
            small_model, small_sched, live_attrs(1), FixedProbe([5.0, 0.0]), 1,
            start_noise(small_model), plan, [0.0, 0.1], seed=0,
        )
        assert not result.success
        assert result.iterations_used == 2
        assert torch.all(result.weights.values == 0.1)
