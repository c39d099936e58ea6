import csv
import json

import numpy as np
import pytest

from nai.distill import ClassifierBank
from nai.engine import (
    Candidate,
    ExitRecord,
    NapConfig,
    dominates,
    exit_histogram,
    infer,
    infer_batch,
    make_grid,
    pareto_front,
    render_report,
    sweep,
    vanilla_infer,
    write_predictions_csv,
)
from nai.errors import ConfigError, InputError
from nai.graph import build_graph
from nai.metering import MacsBreakdown
from nai.pipeline import build_bank, full_stack, prepare
from nai.propagation import stationary_summary
from nai.training import TrainConfig, init_classifier

K = 3


@pytest.fixture(scope="module")
def ctx(tiny_bundle):
    return prepare(tiny_bundle, 0.5)


@pytest.fixture(scope="module", params=["sgc", "s2gc", "sign"])
def bank(request, ctx):
    hidden = (12,) if request.param == "sign" else ()
    return build_bank(ctx, K, request.param, TrainConfig(epochs=30, hidden=hidden), mode="offline")


@pytest.fixture(scope="module")
def sgc_bank(ctx):
    return build_bank(ctx, K, "sgc", TrainConfig(epochs=30), mode="offline")


def held_out(ctx):
    return np.concatenate([ctx.split.validation, ctx.split.test])


def run(ctx, bank, ts, tmin=1, tmax=K, batch_size=500, nodes=None, **kw):
    nodes = held_out(ctx) if nodes is None else nodes
    return infer(ctx.graph, ctx.features, bank, ctx.summary, NapConfig(ts, tmin, tmax, batch_size, **kw), nodes)


def tiny_bank(f, c, k, r):
    clfs = {l: init_classifier(f, c, (), seed=1, order=l) for l in range(1, k + 1)}
    return ClassifierBank("sgc", clfs, meta={"r": repr(r)})


class TestExitRule:
    def test_huge_threshold_exits_everything_at_one(self, ctx, bank):
        out = run(ctx, bank, 1e18)
        n = len(held_out(ctx))
        assert out.histogram(K) == [n, 0, 0]

    @pytest.mark.parametrize("ts", [0.0, 0.3, 1e18])
    def test_degeneracy_matches_full_stack(self, ctx, bank, ts):
        nodes = held_out(ctx)
        out = run(ctx, bank, ts, K, K)
        stack = full_stack(ctx, K, bank.backend)
        expected = bank[K].forward(stack.features(K, nodes))[0].argmax(axis=1)
        np.testing.assert_array_equal(out.predictions, expected)
        assert out.histogram(K) == [0, 0, len(nodes)]

    def test_zero_threshold_is_vanilla(self, ctx, bank):
        nai = run(ctx, bank, 0.0)
        van = vanilla_infer(ctx.graph, ctx.features, bank, ctx.r, held_out(ctx))
        np.testing.assert_array_equal(nai.predictions, van.predictions)
        assert all(r.order == K and r.distance is None for r in nai.records)
        assert nai.macs.propagation == van.macs.propagation
        assert nai.macs.classification == van.macs.classification
        assert nai.macs.distance > 0 and nai.macs.stationary > 0
        assert van.macs.distance == 0 and van.macs.stationary == 0

    def test_path_of_two_exits_at_first_hop(self):
        g = build_graph([(0, 1)], 2)
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        summary = stationary_summary(g, 0.5, x)
        bank = tiny_bank(2, 2, 2, 0.5)
        out = infer_batch(g, x, bank, summary, NapConfig(1e-6, 1, 2), [0, 1])
        assert [r.order for r in out.records] == [1, 1]
        assert all(r.distance < 1e-12 for r in out.records)

    def test_isolated_node_exits_at_tmin(self):
        g = build_graph([(1, 2)], 3)
        x = np.array([[2.0, -1.0], [1.0, 0.0], [0.0, 3.0]])
        bank = tiny_bank(2, 2, 3, 0.5)
        out = infer_batch(g, x, bank, stationary_summary(g, 0.5, x), NapConfig(1e-9, 2, 3), [0])
        assert out.records[0].order == 2
        assert out.records[0].distance == 0.0

    def test_records_respect_thresholds(self, ctx, bank):
        for ts, tmin in [(0.05, 1), (0.2, 2), (0.5, 1)]:
            out = run(ctx, bank, ts, tmin, K)
            assert sum(out.histogram(K)) == len(out.nodes)
            for rec in out.records:
                assert tmin <= rec.order <= K
                if rec.order < K:
                    assert rec.distance is not None and rec.distance < ts
                if rec.distance is None:
                    assert rec.order == K
                assert 0.0 < rec.confidence <= 1.0

    def test_batch_size_independence(self, ctx, sgc_bank):
        ts = float(np.median([r.distance for r in run(ctx, sgc_bank, 1e18).records]))
        a = run(ctx, sgc_bank, ts, batch_size=1)
        b = run(ctx, sgc_bank, ts, batch_size=10_000)
        np.testing.assert_array_equal(a.predictions, b.predictions)
        np.testing.assert_array_equal(a.exit_orders, b.exit_orders)
        assert 0 < (a.exit_orders == 1).sum() < len(a.nodes)

    def test_raising_threshold_never_adds_propagation(self, ctx, sgc_bank):
        prev = None
        for ts in [0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1e9]:
            p = run(ctx, sgc_bank, ts).macs.propagation
            if prev is not None:
                assert p <= prev
            prev = p

    def test_lazy_rebuild_keeps_predictions(self, ctx, sgc_bank):
        a = run(ctx, sgc_bank, 0.1)
        b = run(ctx, sgc_bank, 0.1, rebuild_shrink=0.25)
        np.testing.assert_array_equal(a.predictions, b.predictions)
        np.testing.assert_array_equal(a.exit_orders, b.exit_orders)
        assert b.macs.propagation >= a.macs.propagation


class TestErrors:
    def test_tmax_beyond_bank(self, ctx, sgc_bank):
        with pytest.raises(ConfigError):
            run(ctx, sgc_bank, 0.1, 1, K + 1)

    @pytest.mark.parametrize("cfg", [NapConfig(-1.0, 1, 2), NapConfig(0.1, 3, 2), NapConfig(0.1, 0, 2),
                                     NapConfig(0.1, 1, 2, batch_size=0), NapConfig(float("nan"), 1, 2)])
    def test_config(self, cfg):
        with pytest.raises(ConfigError):
            cfg.validate(3)

    def test_batch_problems(self, ctx, sgc_bank):
        cfg = NapConfig(0.1, 1, K)
        with pytest.raises(InputError):
            infer_batch(ctx.graph, ctx.features, sgc_bank, ctx.summary, cfg, [0, 0])
        with pytest.raises(InputError):
            infer_batch(ctx.graph, ctx.features, sgc_bank, ctx.summary, cfg, [ctx.graph.n])
        with pytest.raises(InputError):
            infer_batch(ctx.graph, ctx.features, sgc_bank, None, cfg, [0])


class TestHistogram:
    def test_all_at_two(self):
        recs = [ExitRecord(i, 2, 0.1, 0, 0.9) for i in range(7)]
        assert exit_histogram(recs, 5) == [0, 7, 0, 0, 0]

    def test_empty(self):
        assert exit_histogram([], 4) == [0, 0, 0, 0]

    def test_mixed(self, rng):
        orders = rng.integers(1, 6, 50)
        recs = [ExitRecord(i, int(o), None, 0, 1.0) for i, o in enumerate(orders)]
        assert exit_histogram(recs, 5) == [int((orders == l).sum()) for l in range(1, 6)]


def cand(acc, fp, tmax=3, ts=0.1):
    return Candidate(ts, 1, tmax, acc, MacsBreakdown(propagation=fp), (), 0.0)


class TestSweep:
    def test_single_degenerate_point(self, ctx, sgc_bank):
        val = ctx.split.validation
        (only,) = sweep(ctx.graph, ctx.features, sgc_bank, ctx.summary, [(0.0, K, K)], val, ctx.labels)
        van = vanilla_infer(ctx.graph, ctx.features, sgc_bank, ctx.r, val)
        assert only.accuracy == van.accuracy(ctx.labels)

    def test_tie_prefers_larger_threshold(self, ctx, sgc_bank):
        val = ctx.split.validation
        out = sweep(ctx.graph, ctx.features, sgc_bank, ctx.summary, [(1e18, 1, 2), (1e19, 1, 2)], val, ctx.labels)
        assert out[0].accuracy == out[1].accuracy and out[0].fp_macs == out[1].fp_macs
        assert [c.ts for c in out] == [1e19, 1e18]

    def test_documented_order(self):
        cs = [cand(0.8, 10), cand(0.9, 50), cand(0.9, 20, tmax=4), cand(0.9, 20, tmax=3, ts=0.1),
              cand(0.9, 20, tmax=3, ts=0.5)]
        ranked = sorted(cs, key=Candidate.sort_key)
        assert ranked == [cs[4], cs[3], cs[2], cs[1], cs[0]]

    def test_empty_grid(self, ctx, sgc_bank):
        with pytest.raises(InputError):
            sweep(ctx.graph, ctx.features, sgc_bank, ctx.summary, [], ctx.split.validation, ctx.labels)

    def test_budget_filters(self, ctx, sgc_bank):
        val = ctx.split.validation
        grid = make_grid([0.0, 1e18], [1], [K])
        allc = sweep(ctx.graph, ctx.features, sgc_bank, ctx.summary, grid, val, ctx.labels)
        cap = min(c.fp_macs for c in allc)
        kept = sweep(ctx.graph, ctx.features, sgc_bank, ctx.summary, grid, val, ctx.labels, max_fp_macs=cap)
        assert [c.ts for c in kept] == [1e18]

    def test_grid(self):
        assert make_grid([0.1], [1, 3], [2, 3]) == [(0.1, 1, 2), (0.1, 1, 3), (0.1, 3, 3)]

    def test_pareto_front_is_non_dominated(self, ctx, sgc_bank):
        quant = run(ctx, sgc_bank, 1e18).records
        d = np.array([r.distance for r in quant])
        grid = make_grid(np.quantile(d, [0.2, 0.5, 0.8]), [1, 2, 3], [1, 2, 3])
        cands = sweep(ctx.graph, ctx.features, sgc_bank, ctx.summary, grid, ctx.split.validation, ctx.labels)
        front = pareto_front(cands)
        for a in front:
            assert not any(dominates(b, a) for b in cands)
        for b in cands:
            if b not in front:
                assert any(dominates(a, b) or (a.accuracy, a.fp_macs) == (b.accuracy, b.fp_macs) for a in front)
        fps = [c.fp_macs for c in front]
        assert fps == sorted(fps)

    def test_pareto_synthetic(self):
        cs = [cand(0.5, 10), cand(0.7, 30), cand(0.6, 40), cand(0.9, 100), cand(0.7, 30, ts=0.9)]
        front = pareto_front(cs)
        assert [(c.accuracy, c.fp_macs) for c in front] == [(0.5, 10), (0.7, 30), (0.9, 100)]
        assert front[1].ts == 0.9


class TestReports:
    def test_predictions_csv(self, ctx, sgc_bank, tmp_path):
        out = run(ctx, sgc_bank, 0.1, nodes=held_out(ctx)[:20])
        write_predictions_csv(out, tmp_path / "p.csv", ctx.arrival)
        rows = list(csv.reader(open(tmp_path / "p.csv")))
        assert rows[0] == ["id", "exit_order", "distance", "predicted_class"]
        assert len(rows) == 21
        for row, rec in zip(rows[1:], out.records):
            assert int(row[0]) == ctx.arrival[rec.node]
            assert int(row[1]) == rec.order and int(row[3]) == rec.predicted
            assert (row[2] == "") == (rec.distance is None)

    def test_report_block(self, ctx, sgc_bank):
        out = run(ctx, sgc_bank, 0.1)
        text = render_report(out, K, ctx.labels)
        block = json.loads(text[text.index("{"):])
        assert sum(block["histogram"]) == block["nodes"] == len(out.nodes)
        assert block["accuracy"] == out.accuracy(ctx.labels)
        m = block["macs"]
        assert m["total"] == m["stationary"] + m["propagation"] + m["distance"] + m["classification"]
        assert block["timings"]["fp_seconds"] <= block["timings"]["total_seconds"]
