import json
import math
from pathlib import Path

import numpy as np
import pytest

from ctxppi.errors import ContractViolation, SamplingExhausted
from ctxppi.kg import ContextGraph
from ctxppi.model import EmbeddingTable, ModelConfig, init_params
from ctxppi.pretrain import (
    Metrics, TrainConfig, eval_link_prediction, pretrain_loss, sample_negatives, split_counts,
    split_edges, train,
)
from ctxppi.synth import SyntheticSpec, generate

GOLDEN = Path(__file__).parent / "golden" / "train_report_2block_seed42.json"


def _complete(n, cid="k"):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return ContextGraph(cid, tuple(f"p{i}" for i in range(n)), np.array(edges))


def _ring(n, cid="r"):
    edges = sorted((min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n))
    return ContextGraph(cid, tuple(f"p{i:03d}" for i in range(n)), np.array(edges))


def _pairs(arr):
    return {(int(a), int(b)) for a, b in arr}


def _two_block():
    spec = SyntheticSpec(n_proteins=200, n_contexts=4, n_blocks=2, blocks_per_context=None,
                         n_positive=20, n_negative=20)
    return generate(spec, 42).knowledge_graph()


class TestSplitCounts:
    def test_large_graph(self):
        assert split_counts(206850) == (165480, 20685, 20685)

    def test_ten_edges(self):
        assert split_counts(10) == (8, 1, 1)

    def test_within_one_of_ratio(self):
        for n in range(10, 400):
            tr, va, te = split_counts(n)
            assert tr + va + te == n
            assert abs(va - 0.1 * n) < 1 and abs(te - 0.1 * n) < 1 and abs(tr - 0.8 * n) < 2


class TestSplitEdges:
    def test_partition_and_negatives(self, small_bundle):
        kg = small_bundle.knowledge_graph()
        split = split_edges(kg.contexts, seed=3)
        for cid, g in kg.contexts.items():
            tr, va, te = _pairs(split.train[cid]), _pairs(split.valid[cid]), _pairs(split.test[cid])
            assert not (tr & va or tr & te or va & te)
            assert tr | va | te == g.edge_set()
            assert (len(tr), len(va), len(te)) == split_counts(g.n_edges)
            vn, tn = _pairs(split.valid_neg[cid]), _pairs(split.test_neg[cid])
            assert len(vn) == len(va) and len(tn) == len(te)
            assert not (vn | tn) & g.edge_set()
            assert not vn & tn
            assert all(a < b for a, b in vn | tn)

    def test_deterministic(self, small_bundle):
        kg = small_bundle.knowledge_graph()
        a, b = split_edges(kg.contexts, seed=9), split_edges(kg.contexts, seed=9)
        for cid in kg.contexts:
            for part in ("train", "valid", "test", "valid_neg", "test_neg"):
                assert np.array_equal(getattr(a, part)[cid], getattr(b, part)[cid])
        c = split_edges(kg.contexts, seed=10)
        assert any(not np.array_equal(a.test[cid], c.test[cid]) for cid in kg.contexts)

    def test_small_context_all_train(self):
        g = _ring(9)
        split = split_edges({"r": g}, seed=0)
        assert len(split.train["r"]) == 9
        assert len(split.valid["r"]) == len(split.test["r"]) == 0
        assert split.warnings and "all assigned to train" in split.warnings[0]

    def test_bad_ratios(self):
        with pytest.raises(ContractViolation):
            split_edges({"r": _ring(20)}, ratios=(0.8, 0.1, 0.2))


class TestNegatives:
    def test_exact_count(self, rng):
        g = _ring(60)
        neg = sample_negatives(g, 100, rng)
        assert neg.shape == (100, 2)
        assert len(_pairs(neg)) == 100
        assert not _pairs(neg) & g.edge_set()
        assert np.all(neg[:, 0] < neg[:, 1])

    def test_complete_graph(self, rng):
        with pytest.raises(SamplingExhausted):
            sample_negatives(_complete(4), 1, rng)

    def test_exclusion(self, rng):
        g = _ring(8)
        first = sample_negatives(g, 10, rng)
        keys = first[:, 0] * 8 + first[:, 1]
        second = sample_negatives(g, 10, rng, exclude_keys=keys)
        assert not _pairs(first) & _pairs(second)

    def test_exhaustive_membership(self, rng):
        g = _ring(200)
        neg = sample_negatives(g, g.n_edges, rng)
        true = g.edge_set()
        assert all(p not in true for p in _pairs(neg))


class TestLoss:
    def _table(self, z):
        return EmbeddingTable({"c": ("a", "b", "d")}, z, ("s",), np.zeros((1, z.shape[1])))

    def test_half_predictions(self):
        t = self._table(np.zeros((3, 2)))
        batch = [("c", "a", "b", 1), ("c", "a", "d", 0), ("c", "b", "d", 1)]
        mem = [("c", "a", "s", 1), ("c", "b", "s", 0)]
        assert pretrain_loss(t, batch, mem) == pytest.approx(math.log(2), abs=1e-15)

    def test_perfect_predictions(self):
        z = np.array([[30.0, 0.0], [30.0, 0.0], [-30.0, 0.0]])
        t = self._table(z)
        assert pretrain_loss(t, [("c", "a", "b", 1), ("c", "a", "d", 0)]) < 1e-12

    def test_hand_batch(self):
        z = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 2.0]])
        t = self._table(z)
        batch = [("c", "a", "b", 1), ("c", "a", "d", 0), ("c", "b", "d", 1)]
        # logits 0.5, 0.0, 1.0
        expect = (-math.log(1 / (1 + math.exp(-0.5))) - math.log(0.5)
                  - math.log(1 / (1 + math.exp(-1.0)))) / 3
        assert pretrain_loss(t, batch) == pytest.approx(expect, abs=1e-14)

    def test_missing_embedding(self):
        with pytest.raises(ContractViolation):
            pretrain_loss(self._table(np.zeros((3, 2))), [("c", "a", "zz", 1)])


class TestEvalLinkPrediction:
    def test_perfect_separation(self):
        z = np.array([[2.0, 0.0], [2.0, 0.0], [-2.0, 0.0], [0.0, 1.0]])
        table = EmbeddingTable({"c": ("a", "b", "d", "e")}, z, (), np.empty((0, 2)))
        m = eval_link_prediction(table, {"c": [(0, 1)]}, {"c": [(0, 2), (1, 2)]})["c"]
        assert m.auroc == 1.0 and m.ap == 1.0
        assert isinstance(m, Metrics)

    def test_single_class_absent(self):
        z = np.eye(3)
        table = EmbeddingTable({"c": ("a", "b", "d")}, z, (), np.empty((0, 3)))
        m = eval_link_prediction(table, {"c": [(0, 1)]}, {"c": []})["c"]
        assert m.auroc is None and m.ap == 1.0


class TestTrain:
    def test_zero_epochs(self, toy_kg):
        cfg = ModelConfig(latent_dim=4)
        params, report = train(toy_kg, cfg, TrainConfig(epochs=0))
        assert params.equals(init_params(cfg, toy_kg))
        assert report.losses == [] and report.epochs_run == 0

    def test_deterministic(self, small_bundle):
        kg = small_bundle.knowledge_graph()
        cfg, tc = ModelConfig(latent_dim=8, seed=2), TrainConfig(epochs=4, seed=2)
        a, ra = train(kg, cfg, tc)
        b, rb = train(kg, cfg, tc)
        assert a.equals(b)
        assert ra.to_json() == rb.to_json()

    def test_golden_trace(self):
        params, report = train(_two_block(), ModelConfig(latent_dim=16, seed=42),
                               TrainConfig(epochs=10, seed=42))
        golden = json.loads(GOLDEN.read_text())
        got = json.loads(report.to_json())
        assert got["epochs_run"] == golden["epochs_run"] and got["best_epoch"] == golden["best_epoch"]
        assert np.allclose(got["losses"], golden["losses"], rtol=0, atol=1e-9)
        assert np.allclose(got["valid_auroc"], golden["valid_auroc"], rtol=0, atol=1e-9)
        # validation AUROC strictly improves across the first ten epochs
        assert np.all(np.diff(report.valid_auroc) > 0)
        assert report.losses[-1] < report.losses[0]

    def test_keeps_best_validation_epoch(self, small_bundle):
        kg = small_bundle.knowledge_graph()
        _, report = train(kg, ModelConfig(latent_dim=8), TrainConfig(epochs=6))
        assert report.best_epoch == int(np.argmax(report.valid_auroc))
        assert report.epochs_run <= 6
        assert all(np.isfinite(report.losses))

    def test_resume_matches_uninterrupted(self, small_bundle):
        kg = small_bundle.knowledge_graph()
        cfg = ModelConfig(latent_dim=8, seed=1)
        full, r_full = train(kg, cfg, TrainConfig(epochs=6, seed=1))
        _, r_half = train(kg, cfg, TrainConfig(epochs=3, seed=1))
        resumed, r_res = train(kg, cfg, TrainConfig(epochs=6, seed=1), resume=r_half.final_state)
        assert resumed.equals(full)
        assert r_res.losses == r_full.losses
        assert r_res.valid_auroc == r_full.valid_auroc

    def test_report_exports(self, toy_kg):
        _, report = train(toy_kg, ModelConfig(latent_dim=4), TrainConfig(epochs=2))
        d = json.loads(report.to_json())
        assert "wall_clock" not in d
        assert "wall_clock" in report.to_dict(include_timing=True)
        assert report.metrics_csv().splitlines()[0] == "context,auroc,ap,acc,f1"
