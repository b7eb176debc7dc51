"""Synthetic data, training, checkpoints, finetuning and detection metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calpa import tensor as T
from calpa.arch import apply_shrink_plan, build_srnet, cost_report, identity_plan
from calpa.criteria import SampleSpec
from calpa.harness import (
    Dataset,
    DatasetSpec,
    ModelCheckpoint,
    SplitValidator,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    compute_metrics,
    evaluate,
    finetune,
    generate_dataset,
    in_memory_dataset,
    load_checkpoint,
    load_dataset,
    p_e,
    p_fa_at,
    save_checkpoint,
    slice_by_plan,
    train,
)
from calpa.harness.data import embed, make_cover
from calpa.harness.pgm import read_pgm, write_pgm
from calpa.harness.train import batch_pairs
from calpa.network import Network
from calpa import pipeline
from calpa.search import SearchConfig
from conftest import chain_graph

TINY = DatasetSpec(count=60, size=32, split=(40, 10, 10), smoothing=3.0, seed=1)


def probe_dataset(seed=0, count=120, size=32):
    """Classes differ by a mean shift of 40 grey levels: linearly separable."""
    rng = np.random.default_rng(seed)
    covers = np.clip(rng.normal(100, 8, (count, size, size)), 0, 255).astype(np.uint8)
    stegos = np.clip(rng.normal(140, 8, (count, size, size)), 0, 255).astype(np.uint8)
    spec = DatasetSpec(count=count, size=size, split=(80, 20, 20))
    idx = np.arange(count)
    return Dataset(spec, covers, stegos, {"train": idx[:80], "val": idx[80:100], "test": idx[100:]})


@pytest.fixture(scope="module")
def probe():
    return probe_dataset()


@pytest.fixture(scope="module")
def probe_graph():
    return chain_graph((4,), size=32)


@pytest.fixture(scope="module")
def tiny_data():
    return in_memory_dataset(TINY)


@pytest.fixture(scope="module")
def trained(tiny_data):
    g = build_srnet(32, 0.125)
    return train(g, tiny_data, TrainConfig(max_iters=20, eval_every=10, batch_size=16))


class TestDataset:
    def test_zero_payload(self, rng):
        cover = make_cover(rng, 32, 2.0)
        np.testing.assert_array_equal(embed(cover, 0.0, rng), cover)

    def test_full_payload_changes_every_pixel(self, rng):
        cover = make_cover(rng, 32, 2.0)
        diff = np.abs(embed(cover, 1.0, rng).astype(int) - cover)
        assert np.all(diff == 1)

    def test_payload_binomial_band(self):
        spec = DatasetSpec(count=100, split=(100, 0, 0), smoothing=2.0)
        data = in_memory_dataset(spec)
        changed = (data.covers != data.stegos).sum(axis=(1, 2))
        n, p = 64 * 64, 0.4
        sigma = np.sqrt(n * p * (1 - p) / 100)
        assert abs(changed.mean() - n * p) <= 3 * sigma

    def test_clamping(self):
        rng = np.random.default_rng(0)
        stego = embed(np.array([[0, 255]], np.uint8), 1.0, rng)
        assert stego.min() >= 0 and stego.max() <= 255

    def test_splits_disjoint_and_exhaustive(self, tiny_data):
        parts = [set(tiny_data.splits[k].tolist()) for k in ("train", "val", "test")]
        assert sum(len(p) for p in parts) == TINY.count
        assert set().union(*parts) == set(range(TINY.count))

    def test_disk_matches_memory(self, tmp_path, tiny_data):
        root = generate_dataset(TINY, tmp_path / "data")
        assert (root / "cover" / "00007.pgm").exists() and (root / "stego" / "00007.pgm").exists()
        loaded = load_dataset(root)
        np.testing.assert_array_equal(loaded.covers, tiny_data.covers)
        np.testing.assert_array_equal(loaded.stegos, tiny_data.stegos)
        for k in tiny_data.splits:
            np.testing.assert_array_equal(loaded.splits[k], tiny_data.splits[k])

    def test_labeled_covers_first(self, tiny_data):
        images, labels = tiny_data.labeled("val")
        assert labels.tolist() == [0] * 10 + [1] * 10
        np.testing.assert_array_equal(images[10:], tiny_data.stegos[tiny_data.splits["val"]])

    @pytest.mark.parametrize("kw", [{"size": 16}, {"payload": 1.5}, {"split": (1, 1, 1)}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            DatasetSpec(**kw).validate()

    def test_pgm_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (5, 7), dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)

    def test_pgm_comment(self, tmp_path):
        (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        assert read_pgm(tmp_path / "b.pgm").tolist() == [[1, 2]]


class TestBatches:
    def test_pure_function_of_iteration(self):
        np.testing.assert_array_equal(batch_pairs(3, 17, 40, 8), batch_pairs(3, 17, 40, 8))

    def test_epoch_covers_every_pair(self):
        seen = np.concatenate([batch_pairs(0, i, 40, 8) for i in range(5)])
        assert sorted(seen.tolist()) == list(range(40))


class TestTrain:
    def test_linear_probe(self, probe, probe_graph):
        result = train(probe_graph, probe, TrainConfig(max_iters=500, eval_every=50, batch_size=16))
        reached = [it for it, _, val, _ in result.curves if val >= 0.99]
        assert reached and reached[0] <= 500

    @pytest.mark.parametrize("opt", ["adamax", "sgd"])
    def test_loss_decreases(self, probe, probe_graph, opt):
        lr = 1e-3 if opt == "adamax" else 1e-2
        result = train(probe_graph, probe, TrainConfig(optimizer=opt, initial_lr=lr, max_iters=100,
                                                       eval_every=20, batch_size=16))
        losses = [c[3] for c in result.curves]
        assert losses[-1] < losses[0]

    def test_bit_identical_runs(self, tiny_data):
        g = build_srnet(32, 0.125)
        cfg = TrainConfig(max_iters=6, eval_every=3, batch_size=8)
        a, b = train(g, tiny_data, cfg), train(g, tiny_data, cfg)
        assert a.curves_csv() == b.curves_csv()
        assert a.last.weights_digest() == b.last.weights_digest()

    def test_best_checkpoint(self, trained):
        assert trained.best.val_acc == max(c[2] for c in trained.curves)
        assert trained.curves_csv().startswith("iteration,train_acc,val_acc,loss\n")

    def test_divergence_reported(self, tiny_data, monkeypatch):
        real = T.softmax_cross_entropy
        calls = []

        def poisoned(logits, labels):
            calls.append(1)
            loss, g = real(logits, labels)
            return (float("nan") if len(calls) == 3 else loss), g

        monkeypatch.setattr(T, "softmax_cross_entropy", poisoned)
        with pytest.raises(TrainingDiverged) as err:
            train(chain_graph((2,), size=32), tiny_data, TrainConfig(max_iters=5, batch_size=4))
        assert err.value.iteration == 3

    def test_lr_schedules(self):
        cfg = TrainConfig(lr_schedule="decay_pct_every", decay_every=10, decay_pct=0.1)
        assert cfg.lr_at(25) == pytest.approx(1e-3 * 0.81)
        cfg = TrainConfig(lr_schedule="step_drop", drop_at=5, drop_factor=0.1)
        assert (cfg.lr_at(4), cfg.lr_at(5)) == (1e-3, pytest.approx(1e-4))

    @pytest.mark.parametrize("kw", [{"batch_size": 7}, {"optimizer": "adam"}, {"lr_schedule": "cosine"}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()


class TestCheckpoint:
    def test_round_trip_then_step(self, tmp_path, tiny_data):
        g = build_srnet(32, 0.125)
        cfg = TrainConfig(max_iters=4, eval_every=2, batch_size=8)
        first = train(g, tiny_data, cfg)
        save_checkpoint(first.last, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.iteration == 4 and loaded.graph_digest == first.last.graph_digest
        more = TrainConfig(max_iters=5, eval_every=2, batch_size=8)
        via_disk = train(loaded, tiny_data, more, resume=True)
        direct = train(first.last, tiny_data, more, resume=True)
        assert via_disk.last.weights_digest() == direct.last.weights_digest()
        straight = train(g, tiny_data, more)
        assert straight.last.weights_digest() == direct.last.weights_digest()

    def test_digest_mismatch(self, tmp_path, trained):
        import json
        save_checkpoint(trained.best, tmp_path / "ck")
        index = json.loads((tmp_path / "ck" / "index.json").read_text())
        index["graph_digest"] = "0" * 16
        (tmp_path / "ck" / "index.json").write_text(json.dumps(index))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "ck")


class TestFinetune:
    def test_identity_equals_training_on(self, tiny_data, trained):
        cfg = TrainConfig(max_iters=3, eval_every=3, batch_size=8)
        a = finetune(trained.best, identity_plan(trained.best.graph), tiny_data, cfg)
        b = train(trained.best, tiny_data, cfg)
        assert a.last.weights_digest() == b.last.weights_digest()

    def test_slice_matches_search(self, tiny_data, trained):
        cfg = SearchConfig(sample_spec=SampleSpec(m=4, n=5), tolerance=0.1)
        result = pipeline.search(trained.best, tiny_data, cfg)
        sliced = slice_by_plan(trained.best.network(), result.plan)
        images, labels = tiny_data.labeled("val")
        assert accuracy(sliced, images, labels) == result.trace.final_acc
        shrunk = apply_shrink_plan(trained.best.graph, result.plan)
        weights = sum(v.size for k, v in sliced.params.items() if k.endswith(".weight"))
        assert weights == cost_report(shrunk).total_params

    def test_l1_fallback_without_keep(self, trained):
        from calpa.arch import uniform_plan
        plan = uniform_plan(trained.best.graph, 0.5)
        sliced = slice_by_plan(trained.best.network(), plan)
        assert sliced.graph.layer("L12.conv2").out_channels == 32

    def test_mismatched_plan(self, trained):
        from calpa.arch import PlanError, ShrinkPlan
        with pytest.raises(PlanError):
            slice_by_plan(trained.best.network(), ShrinkPlan({"nope": 1.0}))


class TestValidator:
    def test_prepared_matches_plain(self, tiny_data, trained):
        from calpa.network import prune_channels
        images, labels = tiny_data.labeled("val")
        v = SplitValidator(images, labels)
        net = trained.best.network()
        pruned = prune_channels(net, ["L10.conv1"], [0, 1])
        plain = v.scores(pruned)
        v.prepare(net, ["L10.conv1"])
        np.testing.assert_array_equal(v.scores(pruned), plain)
        v.release()

    def test_subsample(self, tiny_data):
        images, labels = tiny_data.labeled("val")
        assert len(SplitValidator(images, labels, subsample=6).labels) == 6


class TestMetrics:
    COVERS = [0.7, 0.3, 0.2]
    STEGOS = [0.9, 0.8, 0.4]

    def brute_force_pe(self, covers, stegos):
        best = 1.0
        for tau in sorted(set(covers) | set(stegos)) + [np.inf]:
            pfa = np.mean(np.asarray(covers) >= tau)
            pmd = np.mean(np.asarray(stegos) < tau)
            best = min(best, 0.5 * (pfa + pmd))
        return best

    def test_hand_roc(self):
        assert p_fa_at(self.COVERS, self.STEGOS, 0.7) == pytest.approx(1 / 3)
        assert p_e(self.COVERS, self.STEGOS)[0] == pytest.approx(1 / 6)
        assert self.brute_force_pe(self.COVERS, self.STEGOS) == pytest.approx(1 / 6)

    def test_perfect_separator(self):
        m = compute_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert m.p_e == 0 and all(v == 0 for v in m.p_fa.values()) and m.accuracy == 1

    def test_constant_scores(self):
        m = compute_metrics([0.5] * 6, [0, 0, 0, 1, 1, 1])
        assert m.p_e == 0.5

    def test_row_layout(self):
        m = compute_metrics([0.1, 0.9], [0, 1])
        assert list(m.row()) == ["accuracy", "P_E", "P_MD", "P_FA(70%)", "P_FA(50%)", "P_FA(30%)"]

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics([0.3], [0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.lists(st.floats(0, 1), min_size=2, max_size=12))
    def test_pe_against_brute_force(self, covers, stegos):
        assert p_e(covers, stegos)[0] == pytest.approx(self.brute_force_pe(covers, stegos))
        m = compute_metrics(covers + stegos, [0] * len(covers) + [1] * len(stegos))
        assert 0 <= m.p_e <= 0.5 and 0 <= m.p_md <= 1
        assert all(0 <= v <= 1 for v in m.p_fa.values())

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-40, 40), min_size=8, max_size=8), st.sampled_from(["exp", "cube", "affine"]))
    def test_monotone_invariance(self, grid, kind):
        # grid-spaced scores keep the transforms strictly monotone in floating point
        f = {"exp": np.exp, "cube": lambda s: s ** 3, "affine": lambda s: 3 * s - 7}[kind]
        scores = np.array(grid) / 8.0
        c, s = scores[:4], scores[4:]
        assert p_e(f(c), f(s)) == p_e(c, s)
        for d in (0.3, 0.5, 0.7):
            assert p_fa_at(f(c), f(s), d) == p_fa_at(c, s, d)

    def test_evaluate(self, tiny_data, trained):
        m = evaluate(trained.best, tiny_data, "test")
        assert 0 <= m.accuracy <= 1
        with pytest.raises(ValueError):
            evaluate(trained.best, Dataset(TINY, tiny_data.covers, tiny_data.stegos,
                                           {"test": np.array([], np.int64)}), "test")
