"""Cost-model correctness: formulas vs instrumented matmuls, monotonicity."""

import numpy as np
import pytest

from tokenprune import autodiff as ad
from tokenprune.autodiff import Tape
from tokenprune.model import Model, ModelConfig, full_forward, layer_forward
from tokenprune.profiling import (
    FlopsReport,
    batch_runner,
    layer_flops,
    policy_flops,
    trace_flops,
    wall_time,
)
from tokenprune.reduction import fixed_plan, reduced_forward

from conftest import tiny_config


class TestLayerFlops:
    def test_hand_computed_example(self):
        assert layer_flops(4, 8, 2, 32) == 2048 + 512 + 4096

    def test_single_token(self):
        d, f = 8, 32
        assert layer_flops(1, d, 2, f) == 8 * d * d + 4 * d + 4 * d * f

    def test_formula_scaling_in_n(self):
        # quadratic term dominant: doubling n more than doubles the count
        big_n = layer_flops(512, 4, 1, 4)
        assert big_n > 2 * layer_flops(256, 4, 1, 4)
        # linear terms dominant: doubling n stays within the quadratic correction
        d, f, n = 256, 1024, 2
        ratio = layer_flops(2 * n, d, 2, f) / layer_flops(n, d, 2, f)
        assert 2.0 <= ratio < 2.01

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            layer_flops(0, 8, 2, 4)
        with pytest.raises(ValueError):
            layer_flops(4, 8, 3, 4)

    @pytest.mark.parametrize("trial", range(50))
    def test_matches_instrumented_layer(self, trial):
        rng = np.random.default_rng(trial)
        heads = int(rng.integers(1, 4))
        d = int(heads * rng.integers(2, 9))
        n = int(rng.integers(1, 12))
        f = int(rng.integers(4, 40))
        cfg = ModelConfig(
            num_layers=1,
            hidden=d,
            heads=heads,
            ffn_inner=f,
            vocab_size=16,
            max_len=16,
            reduction_positions=(),
            num_classes=2,
        )
        model = Model.init(cfg, seed=trial)
        tape = Tape(recording=False)
        pn = model.bind(tape)
        H = tape.const(rng.normal(size=(n, d)))
        with ad.matmul_flop_counter() as counter:
            layer_forward(tape, pn, cfg, 0, H)
        assert counter.total == layer_flops(n, d, heads, f)


class TestTraceFlops:
    def test_no_reduction_modules_speedup_is_one(self):
        cfg = tiny_config(reduction_positions=())
        model = Model.init(cfg, seed=0)
        report = trace_flops(full_forward(model, [0, 1, 2, 3]).trace, cfg)
        assert report.speedup == 1.0
        assert report.total == report.reference_total

    def test_all_select_policy_run_is_pure_overhead(self, tiny_model):
        for t in range(tiny_model.config.num_modules):
            tiny_model.params[f"policy{t}.b2"][:] = 50.0  # greedy keeps everything
        result = reduced_forward(tiny_model, [0, 1, 2, 3])
        report = trace_flops(result.trace, tiny_model.config)
        assert report.speedup < 1.0
        n, cfg = 4, tiny_model.config
        assert report.total == report.reference_total + policy_flops(
            n, cfg.hidden, cfg.policy_width
        )

    def test_fixed_plans_carry_no_policy_cost(self, tiny_model):
        plan = fixed_plan((1,), [np.ones(4, bool)])
        result = reduced_forward(tiny_model, [0, 1, 2, 3], plan=plan)
        report = trace_flops(result.trace, tiny_model.config)
        assert report.per_module == []
        assert report.speedup == 1.0

    def test_additivity(self, tiny_model):
        result = reduced_forward(tiny_model, [0, 1, 2, 3])
        report = trace_flops(result.trace, tiny_model.config)
        assert report.total == sum(report.per_layer) + sum(report.per_module)

    def test_half_drop_before_second_layer_approaches_closed_form(self):
        # with the quadratic and feed-forward terms negligible, dropping half
        # the tokens before layer 1 approaches speedup 2L/(L+1) as d grows
        L, n = 6, 16
        for d in (64, 256, 1024):
            cfg = ModelConfig(
                num_layers=L,
                hidden=d,
                heads=2,
                ffn_inner=2,
                vocab_size=32,
                max_len=32,
                reduction_positions=(1,),
                num_classes=2,
            )
            model = Model.init(cfg, seed=0)
            mask = np.zeros(n, bool)
            mask[: n // 2] = True
            plan = fixed_plan((1,), [mask])
            trace = reduced_forward(model, list(range(n)), plan=plan).trace
            speedup = trace_flops(trace, cfg).speedup
        limit = 2 * L / (L + 1)
        assert abs(speedup - limit) < 0.02

    def test_skips_never_increase_flops(self):
        cfg = tiny_config(num_layers=3, reduction_positions=(1, 2), max_len=16)
        model = Model.init(cfg, seed=3)
        rng = np.random.default_rng(0)
        n = 8
        ids = list(range(n))
        for _ in range(200):
            m1 = rng.random(n) < 0.7
            m1[0] = True
            m2 = rng.random(int(m1.sum())) < 0.7
            m2[0] = True
            base_plan = fixed_plan((1, 2), [m1, m2])
            base = trace_flops(reduced_forward(model, ids, plan=base_plan).trace, cfg).total
            # flip one Select to Skip somewhere
            which = int(rng.integers(0, 2))
            masks = [m1.copy(), m2.copy()]
            sel = np.flatnonzero(masks[which])
            sel = sel[sel > 0]
            if sel.size == 0:
                continue
            kill = int(sel[rng.integers(0, sel.size)])
            masks[which][kill] = False
            if which == 0:
                # module 2 loses the corresponding survivor slot
                slot = int(np.flatnonzero(np.flatnonzero(m1) == kill)[0])
                masks[1] = np.delete(m2, slot)
            perturbed_plan = fixed_plan((1, 2), masks)
            perturbed = trace_flops(
                reduced_forward(model, ids, plan=perturbed_plan).trace, cfg
            ).total
            assert perturbed <= base

    def test_report_reproducible(self, tiny_model):
        ids = [0, 1, 2, 3, 4]
        a = trace_flops(reduced_forward(tiny_model, ids).trace, tiny_model.config)
        b = trace_flops(reduced_forward(tiny_model, ids).trace, tiny_model.config)
        assert a.total == b.total and a.per_layer == b.per_layer


class TestWallTime:
    def test_identical_work_times_within_noise(self, tiny_model):
        runner = batch_runner(tiny_model, [[0, 1, 2, 3]] * 4, mode="full")
        a = wall_time(runner, repeats=9)
        b = wall_time(runner, repeats=9)
        ratio = a.median_seconds / b.median_seconds
        assert 0.5 < ratio < 2.0

    def test_heavy_pruning_is_faster(self):
        cfg = tiny_config(num_layers=4, reduction_positions=(1,), max_len=40)
        model = Model.init(cfg, seed=1)
        ids = list(range(32))
        model_pruned = model.copy()
        for t in range(cfg.num_modules):
            model_pruned.params[f"policy{t}.b2"][:] = -50.0  # greedy drops all but anchor
        full_runner = batch_runner(model, [ids] * 8, mode="full")
        pruned_runner = batch_runner(model_pruned, [ids] * 8, mode="greedy")
        t_full = wall_time(full_runner, repeats=15).median_seconds
        t_pruned = wall_time(pruned_runner, repeats=15).median_seconds
        assert t_pruned < t_full

    def test_resolution_guard_loops_fast_functions(self):
        result = wall_time(lambda: None, repeats=3, min_measurable=1e-4)
        assert result.inner_loops > 1
