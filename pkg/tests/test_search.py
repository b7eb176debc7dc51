"""Rate determination, criterion dispatch, bottom-up traversal and baselines."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calpa.arch import ArchGraph, LayerSpec, ShrinkPlan, apply_shrink_plan, build_srnet
from calpa.criteria import SampleSpec
from calpa.network import Network
from calpa.search import (
    SearchConfig,
    baseline_plan,
    bottom_up_search,
    determine_rate,
    dispatch_criterion,
    run_rate_loop,
    sweep,
)
from conftest import chain_graph
from graphs import ParamValidator, ScriptedValidator, random_residual_graph

SMALL = SearchConfig(sample_spec=SampleSpec(m=2, n=4))


def scripted(accs):
    it = iter(accs)
    return lambda gamma: next(it)


@pytest.fixture(scope="module")
def wide_net():
    return Network.init(chain_graph((20, 20, 20)), seed=0)


@pytest.fixture(scope="module")
def srnet():
    return build_srnet(64, 0.25)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(5).standard_normal((4, 1, 16, 16)).astype(np.float32)


class TestRateLoop:
    def test_cumulative_drop(self):
        r = run_rate_loop(scripted([0.89, 0.88, 0.84]), 0.90, SearchConfig())
        assert (r.zeta, r.exit_reason) == (0.90, "cumulative_drop")
        assert r.gammas == [0.05, 0.10, 0.15]

    def test_sudden_drop(self):
        r = run_rate_loop(scripted([0.895, 0.83]), 0.90, SearchConfig())
        assert (r.zeta, r.exit_reason) == (0.95, "sudden_drop")

    def test_cap(self):
        r = run_rate_loop(lambda g: 0.90, 0.90, SearchConfig())
        assert (r.zeta, r.exit_reason) == (0.05, "cap")
        assert len(r.gammas) == 19

    def test_custom_cap(self):
        r = run_rate_loop(lambda g: 0.90, 0.90, SearchConfig(gamma_cap=0.5))
        assert r.zeta == 0.5

    def test_first_step_violation_keeps_everything(self):
        r = run_rate_loop(scripted([0.5]), 0.9, SearchConfig())
        assert (r.zeta, r.accepted_steps) == (1.0, 0)

    def test_exits_disabled(self):
        r = run_rate_loop(lambda g: 1.0 - g, 1.0, SearchConfig(disable_exits=True))
        assert r.exit_reason == "cap" and len(r.accs) == 19

    @pytest.mark.parametrize("kw", [{"step": 0.0}, {"step": 0.5, "gamma_cap": 0.3}, {"gamma_cap": 1.0},
                                    {"tolerance": 1.5}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SearchConfig(**kw).validate()

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=19, max_size=19), st.floats(0.0, 1.0),
           st.floats(0.01, 0.3))
    def test_trace_replay_and_grid(self, accs, acc0, tol):
        cfg = SearchConfig(tolerance=tol)
        first = run_rate_loop(scripted(accs), acc0, cfg)
        again = run_rate_loop(scripted(first.accs), acc0, cfg)
        assert again.zeta == first.zeta and again.exit_reason == first.exit_reason
        grid = {round(1 - 0.05 * i, 10) for i in range(0, 20)}
        assert first.zeta in grid
        # one rollback: the accepted rate is exactly one step below the last tried rate
        if first.exit_reason != "cap":
            assert first.accepted_steps == len(first.gammas) - 1


class TestDetermineRate:
    def test_scripted_through_real_pruning(self, wide_net):
        for accs, expected in [([0.90, 0.89, 0.88, 0.84], (0.90, "cumulative_drop")),
                               ([0.90, 0.895, 0.83], (0.95, "sudden_drop")),
                               ([0.90], (0.05, "cap"))]:
            d = determine_rate(wide_net, "c2", ScriptedValidator(accs), SearchConfig())
            assert (d.zeta, d.trace.exit_reason) == expected
            assert len(d.trace.keep) == round(20 * d.zeta)
            assert d.model.graph.layer("c2").out_channels == len(d.trace.keep)

    def test_thinet_layer(self, wide_net, images):
        d = determine_rate(wide_net, "c0", ScriptedValidator([0.9, 0.9, 0.7]), SMALL, images)
        assert d.trace.criterion == "thinet"
        assert d.zeta == 0.95

    def test_thinet_needs_images(self, wide_net):
        with pytest.raises(ValueError):
            determine_rate(wide_net, "c0", ScriptedValidator([0.9]), SMALL)

    def test_already_assigned(self, wide_net):
        with pytest.raises(ValueError):
            determine_rate(wide_net, "c2", ScriptedValidator([0.9]), SMALL, assigned=["c2"])

    def test_validator_failure_propagates(self, wide_net):
        def broken(net):
            raise RuntimeError("validator down")
        with pytest.raises(RuntimeError):
            determine_rate(wide_net, "c2", broken, SMALL)

    def test_same_width_evaluated_once(self):
        net = Network.init(chain_graph((4, 4, 4)), seed=0)
        v = ScriptedValidator([0.9])
        d = determine_rate(net, "c2", v, SearchConfig())
        # widths 4, 3, 2, 1 plus the baseline call
        assert v.calls == 4
        assert d.zeta == 0.05


class TestDispatch:
    def test_plain_inside_block(self, srnet):
        assert dispatch_criterion(srnet, "L3.conv1") == "thinet"
        assert dispatch_criterion(srnet, "L1.conv") == "thinet"

    def test_direct_lowest(self, srnet):
        assert dispatch_criterion(srnet, "L2.conv") == "l1_direct"

    def test_transformed(self, srnet):
        assert dispatch_criterion(srnet, "L9.conv2") == "l1_transformed"

    @pytest.mark.parametrize("lid", ["L4.conv2", "L9.sc_conv"])
    def test_inherited_members(self, srnet, lid):
        with pytest.raises(ValueError):
            dispatch_criterion(srnet, lid)

    def test_conv_before_head(self, srnet):
        assert dispatch_criterion(srnet, "L12.conv2") == "l1"


class TestBottomUp:
    def test_no_prunable_layers(self):
        layers = [LayerSpec("in", "input"), LayerSpec("c", "conv", ("in",), out_channels=2),
                  LayerSpec("gap", "global_pool", ("c",)), LayerSpec("fc", "fully_connected", ("gap",), out_channels=2)]
        net = Network.init(ArchGraph.resolve("t", 8, layers))
        result = bottom_up_search(net, ScriptedValidator([0.9]), SMALL)
        assert result.plan.rates == {}

    def test_constant_accuracy_hits_cap(self, wide_net, images):
        result = bottom_up_search(wide_net, ScriptedValidator([0.9]), SMALL, images)
        assert set(result.plan.rates.values()) == {0.05}
        assert {lt.exit_reason for lt in result.trace.layers} == {"cap"}

    def test_infinite_tolerance(self, images):
        net = Network.init(build_srnet(32, 0.25), seed=0)
        v = ParamValidator(net.num_parameters(), slope=0.9)
        cfg = SearchConfig(tolerance=1.0, sample_spec=SampleSpec(m=2, n=4))
        imgs = np.random.default_rng(0).standard_normal((2, 1, 32, 32)).astype(np.float32)
        result = bottom_up_search(net, v, cfg, imgs)
        assert {lt.exit_reason for lt in result.trace.layers} == {"cap"}
        assert set(result.plan.rates.values()) == {0.05}

    def test_zero_tolerance_strictly_decreasing(self, wide_net, images):
        v = ParamValidator(wide_net.num_parameters(), slope=0.5)
        result = bottom_up_search(wide_net, v, SearchConfig(tolerance=0.0, sample_spec=SampleSpec(2, 4)), images)
        assert set(result.plan.rates.values()) == {1.0}

    def test_cumulative_model_matches_plan(self, images):
        rng = np.random.default_rng(8)
        g = random_residual_graph(rng)
        net = Network.init(g, seed=1)
        v = ParamValidator(net.num_parameters(), slope=0.3)
        result = bottom_up_search(net, v, SMALL, images)
        shrunk = apply_shrink_plan(g, result.plan)
        assert [x.out_channels for x in result.model.graph.layers] == [x.out_channels for x in shrunk.layers]
        assert result.trace.final_acc == pytest.approx(v(result.model))

    def test_independent_mode(self, wide_net, images):
        v = ParamValidator(wide_net.num_parameters(), slope=0.3)
        cfg = SearchConfig(sample_spec=SampleSpec(2, 4), cumulative=False)
        result = bottom_up_search(wide_net, v, cfg, images)
        assert all(lt.acc0 == pytest.approx(0.9) for lt in result.trace.layers)
        assert result.trace.config["cumulative"] is False

    def test_trace_csv(self, wide_net, images):
        result = bottom_up_search(wide_net, ScriptedValidator([0.9, 0.9, 0.5]), SMALL, images)
        text = result.trace.to_csv({"seed": 0})
        assert text.startswith("# seed: 0\nlayer_id,gamma,acc,exit_reason\n")
        assert text.count("sudden_drop") == 1

    def test_groups_get_equal_rates(self, images):
        rng = np.random.default_rng(3)
        for _ in range(5):
            g = random_residual_graph(rng)
            net = Network.init(g, seed=0)
            v = ParamValidator(net.num_parameters(), slope=float(rng.uniform(0.05, 0.6)))
            plan = bottom_up_search(net, v, SMALL, images).plan
            for grp in g.groups:
                assert len({plan.rates[m] for m in grp.members}) == 1


class TestSweep:
    def test_rows(self, wide_net):
        v = ParamValidator(wide_net.num_parameters(), slope=0.5)
        rows = sweep(wide_net, ["c2"], v, SearchConfig())
        assert rows[0] == ("c2", 0.0, pytest.approx(0.9))
        assert len(rows) == 20
        accs = [a for _, _, a in rows]
        assert all(b <= a for a, b in zip(accs, accs[1:]))


class TestBaselines:
    @pytest.fixture
    def plan(self):
        return ShrinkPlan({"a": 0.05, "b": 0.55, "c": 1.0}, {"a": "thinet", "b": "l1", "c": "thinet"})

    def test_aggr(self, plan):
        assert set(baseline_plan(plan, "aggr").rates.values()) == {0.05}

    def test_avg(self, plan):
        assert set(baseline_plan(plan, "avg").rates.values()) == {0.55}
        raw = baseline_plan(plan, "avg", quantize=False).rates["a"]
        assert raw == pytest.approx(1.6 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            baseline_plan(ShrinkPlan({}), "aggr")

    def test_unknown_kind(self, plan):
        with pytest.raises(ValueError):
            baseline_plan(plan, "median")
