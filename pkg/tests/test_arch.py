"""Architecture graphs, builders, cost accounting and shrink plans."""

import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calpa.arch import (
    ArchGraph,
    GraphError,
    LayerSpec,
    PlanError,
    ShrinkPlan,
    apply_shrink_plan,
    build_srnet,
    build_xunet2,
    classify_shortcuts,
    cost_report,
    dct4_filters,
    graph_from_dict,
    graph_to_dict,
    identity_plan,
    load_graph,
    load_plan,
    save_graph,
    save_plan,
    shrunk_width,
    uniform_plan,
)
from calpa.arch.cost import sci
from calpa.tensor import ShapeError
from conftest import chain_graph
from graphs import random_residual_graph

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


@pytest.fixture(scope="module")
def srnet():
    return build_srnet(256, 1)


@pytest.fixture(scope="module")
def xunet():
    return build_xunet2(256)


class TestSRNet:
    def test_full_size_totals(self, srnet):
        report = cost_report(srnet)
        assert report.conv_params == 4_770_624
        assert report.total_params == 4_771_648
        assert report.total_flops == 5_951_718_400
        assert sci(report.total_params, 4) == "477.16x10^4"

    def test_top_block_widths(self, srnet):
        for blk, k, s in zip(["L9", "L10", "L11", "L12"], [64, 128, 256, 512], [128, 64, 32, 16]):
            layer = srnet.layer(f"{blk}.conv2")
            assert (layer.out_channels, layer.out_height) == (k, s)

    def test_scaled_widths(self):
        g = build_srnet(64, 0.25)
        assert [g.layer(f"L{i}.conv2").out_channels for i in (9, 10, 11, 12)] == [16, 32, 64, 128]
        assert g.layer("L2.conv").out_channels == 4

    def test_tiny_scale_clamps_to_one(self):
        g = build_srnet(32, 0.001)
        assert min(c.out_channels for c in g.convs()) >= 1

    @pytest.mark.parametrize("size,scale", [(100, 1), (256, 0), (256, 1.5)])
    def test_bad_arguments(self, size, scale):
        with pytest.raises(GraphError):
            build_srnet(size, scale)

    def test_direct_chain(self, srnet):
        direct = [g for g in srnet.groups if g.kind == "direct"]
        assert len(direct) == 1
        assert direct[0].lowest == "L2.conv"
        assert set(direct[0].members) == {"L2.conv"} | {f"L{i}.conv2" for i in range(3, 8)}

    def test_transformed_pairs(self, srnet):
        pairs = {g.lowest: g for g in srnet.groups if g.kind == "transformed"}
        assert set(pairs) == {f"L{i}.conv2" for i in range(8, 12)}
        assert pairs["L9.conv2"].members == ("L9.conv2", "L9.sc_conv")
        assert pairs["L9.conv2"].transform_layer == "L9.sc_conv"

    def test_every_add_input_conv_in_one_group(self, srnet):
        seen = [m for g in srnet.groups for m in g.members]
        assert len(seen) == len(set(seen))
        for g in srnet.groups:
            assert len({srnet.layer(m).out_channels for m in g.members}) == 1

    def test_head(self, srnet):
        assert srnet.output_layer().kind == "fully_connected"
        assert srnet.output_layer().out_channels == 2


class TestXuNet2:
    def test_bottom_layer(self, xunet):
        dct = xunet.layer("dct")
        assert (dct.kind, dct.out_channels, dct.kernel, dct.prunable) == ("fixed_preproc", 16, 4, False)
        assert dct.out_height == 256
        assert xunet.layer("trunc").activation == "truncate"

    def test_dct_gram_is_diagonal(self):
        flat = dct4_filters().reshape(16, 16)
        gram = flat @ flat.T
        np.testing.assert_allclose(gram - np.diag(np.diag(gram)), 0, atol=1e-12)
        # high-pass members have zero mean
        np.testing.assert_allclose(flat[1:].sum(axis=1), 0, atol=1e-12)

    def test_groups(self, xunet):
        kinds = sorted(g.kind for g in xunet.groups)
        assert kinds.count("transformed") == 5
        assert all(not g.members[0].startswith("dct") for g in xunet.groups)

    def test_not_in_prunable(self, xunet):
        assert "dct" not in {c.id for c in xunet.prunable_convs()}

    def test_size_check(self):
        with pytest.raises(GraphError):
            build_xunet2(48)


class TestCost:
    def test_single_conv(self):
        layers = [LayerSpec("in", "input"),
                  LayerSpec("a", "conv", ("in",), out_channels=16, kernel=3, padding=1),
                  LayerSpec("c", "conv", ("a",), out_channels=16, kernel=3, padding=1)]
        g = ArchGraph.resolve("t", 256, layers)
        row = cost_report(g).row("c")
        assert row.params == 2304
        assert row.flops == 150_994_944

    def test_totals_are_sums(self, srnet):
        report = cost_report(srnet)
        assert report.total_params == sum(r.params for r in report.rows)
        assert report.total_flops == sum(r.flops for r in report.rows)

    def test_csv(self, chain):
        text = cost_report(chain).to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "layer_id,kind,params,flops"
        assert lines[-1].startswith("TOTAL")


class TestClassify:
    def test_chain_has_no_groups(self, chain):
        assert classify_shortcuts(chain) == []

    def test_add_shape_mismatch(self):
        layers = [LayerSpec("in", "input"),
                  LayerSpec("a", "conv", ("in",), out_channels=16, kernel=3, padding=1),
                  LayerSpec("b", "conv", ("in",), out_channels=15, kernel=3, padding=1),
                  LayerSpec("s", "add", ("a", "b"))]
        with pytest.raises(ShapeError):
            ArchGraph.resolve("t", 8, layers)

    def test_idempotent(self, srnet):
        assert classify_shortcuts(srnet) == classify_shortcuts(srnet) == list(srnet.groups)

    def test_stable_under_reordering(self, rng):
        # a valid alternative topological order: emit shortcut branches first
        for _ in range(10):
            g = random_residual_graph(rng)
            shortcut_first = sorted(g.layers, key=lambda x: (g.depth[x.id], x.role != "shortcut"))
            g2 = ArchGraph.resolve(g.name, g.input_size, shortcut_first)
            assert set(g2.groups) == set(g.groups)

    def test_cycle_rejected(self):
        layers = [LayerSpec("in", "input"),
                  LayerSpec("a", "conv", ("b",), out_channels=2),
                  LayerSpec("b", "conv", ("a",), out_channels=2)]
        with pytest.raises(GraphError):
            ArchGraph.resolve("t", 8, layers)

    def test_fixed_preproc_not_prunable(self):
        layers = [LayerSpec("in", "input"),
                  LayerSpec("d", "fixed_preproc", ("in",), out_channels=4, kernel=4, prunable=True)]
        with pytest.raises(GraphError):
            ArchGraph.resolve("t", 8, layers)


class TestShrinkPlan:
    def test_identity(self, srnet):
        out = apply_shrink_plan(srnet, identity_plan(srnet))
        assert out.structurally_equal(srnet)

    def test_rounding(self):
        assert shrunk_width(512, 0.05) == 26
        assert shrunk_width(3, 0.05) == 1
        assert shrunk_width(10, 0.25) == 3  # 2.5 rounds up

    def test_uniform_half_quarters_interior(self):
        g = chain_graph((8, 8, 8))
        out = apply_shrink_plan(g, uniform_plan(g, 0.5))
        before, after = cost_report(g), cost_report(out)
        assert after.row("c1").params / before.row("c1").params == 0.25
        assert after.row("c1").flops / before.row("c1").flops == 0.25
        # first conv sees fixed input channels
        assert after.row("c0").params / before.row("c0").params == 0.5

    def test_successor_input_channels(self, srnet):
        plan = uniform_plan(srnet, 0.5)
        out = apply_shrink_plan(srnet, plan)
        assert out.layer("L2.conv").in_channels == 32
        assert out.name == "calpa-srnet"

    def test_group_inconsistent(self, srnet):
        rates = identity_plan(srnet).rates
        rates["L3.conv2"] = 0.5
        with pytest.raises(PlanError):
            apply_shrink_plan(srnet, ShrinkPlan(rates))

    @pytest.mark.parametrize("rate", [0.0, 1.2, 0.33])
    def test_invalid_rates(self, chain, rate):
        with pytest.raises(PlanError):
            apply_shrink_plan(chain, uniform_plan(chain, rate))

    def test_missing_layer(self, chain):
        with pytest.raises(PlanError):
            apply_shrink_plan(chain, ShrinkPlan({"c0": 1.0}))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 20))
    def test_groups_survive_shrinking(self, seed, steps):
        rng = np.random.default_rng(seed)
        g = random_residual_graph(rng)
        rates = {}
        for c in g.prunable_convs():
            lowest = g.group_of(c.id).lowest if g.group_of(c.id) else c.id
            rates.setdefault(lowest, round(0.05 * int(rng.integers(1, steps + 1)), 10))
            rates[c.id] = rates[lowest]
        plan = ShrinkPlan({c.id: rates[c.id] for c in g.prunable_convs()})
        out = apply_shrink_plan(g, plan)
        for grp in out.groups:
            assert len({out.layer(m).out_channels for m in grp.members}) == 1
        for add in (x for x in out.layers if x.kind == "add"):
            a, b = (out.layer(i) for i in add.inputs)
            assert (a.out_channels, a.out_height, a.out_width) == (b.out_channels, b.out_height, b.out_width)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 20))
    def test_uniform_scaling_law(self, steps):
        rate = round(0.05 * steps, 10)
        g = chain_graph((20, 20, 20))
        out = apply_shrink_plan(g, uniform_plan(g, rate))
        k = shrunk_width(20, rate)
        ratio = cost_report(out).row("c1").params / cost_report(g).row("c1").params
        assert ratio == pytest.approx((k / 20) ** 2)
        assert abs(ratio - rate ** 2) <= 2 * 0.5 / 20 + 0.25 / 400


class TestSerialization:
    @pytest.mark.parametrize("builder", [lambda: build_srnet(64, 0.25), lambda: build_xunet2(64)])
    def test_round_trip(self, tmp_path, builder):
        g = builder()
        save_graph(g, tmp_path / "g.json")
        assert load_graph(tmp_path / "g.json").structurally_equal(g)

    def test_random_round_trip(self, rng):
        for _ in range(10):
            g = random_residual_graph(rng)
            assert graph_from_dict(graph_to_dict(g)).structurally_equal(g)

    def test_arch_schema(self, srnet):
        schema = json.loads((SCHEMAS / "arch.schema.json").read_text())
        jsonschema.validate(graph_to_dict(srnet), schema)
        jsonschema.validate(graph_to_dict(build_xunet2(64)), schema)

    def test_plan_schema(self, tmp_path, srnet):
        schema = json.loads((SCHEMAS / "plan.schema.json").read_text())
        plan = uniform_plan(srnet, 0.5, provenance="l1")
        save_plan(plan, tmp_path / "p.json", meta={"seed": 0})
        jsonschema.validate(json.loads((tmp_path / "p.json").read_text()), schema)
        assert load_plan(tmp_path / "p.json") == plan

    def test_tampered_groups_rejected(self, srnet):
        data = graph_to_dict(srnet)
        data["groups"] = data["groups"][1:]
        with pytest.raises(ValueError):
            graph_from_dict(data)
