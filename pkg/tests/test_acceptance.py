"""Acceptance suite. Each test prints one PASS/FAIL line at the required
tolerance; run ``pytest -s tests/test_acceptance.py`` to see them."""

import time

import numpy as np
import pytest

from ctxppi import autodiff as ad
from ctxppi.analysis import cell_similarity, compare_models, cosine, protein_context_similarity
from ctxppi.baseline import random_walk_embeddings, replicate_into_contexts
from ctxppi.checkpoint import dumps, load_checkpoint, loads
from ctxppi.cli import main
from ctxppi.errors import CorruptCheckpoint
from ctxppi.finetune import (
    MlpConfig, RiskLabelSet, build_finetune_dataset, evaluate_contexts, train_mlp,
)
from ctxppi.kg import ContextGraph, graph_density, summarize
from ctxppi.metrics import ap_at_k, auroc, average_precision, precision_at_k, recall_at_k
from ctxppi.model import (
    EmbeddingTable, ModelConfig, forward, forward_on_tape, init_params, make_batch, params_on_tape,
)
from ctxppi.pretrain import (
    LossInputs, TrainConfig, embed, loss_on_tape, split_counts, split_edges, train,
)
from ctxppi.synth import SyntheticSpec, _blocks, generate

from conftest import make_kg, random_kg
from oracles import ap_thresholds, auroc_pairs, ranking_prefix
from test_autodiff import PRIMITIVES


def verdict(number, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, detail


def _mean(per_context, key):
    vals = [m[key] for m in per_context.values() if m is not None and m[key] is not None]
    return float(np.mean(vals))


def _matched_control(spec):
    """Same protein count and expected edge density as ``spec``, no blocks."""
    sizes = np.array([len(b) for b in _blocks(spec.n_proteins, spec.n_blocks)])
    total = spec.n_proteins * (spec.n_proteins - 1) / 2
    intra = float(np.sum(sizes * (sizes - 1) / 2))
    p = (intra * spec.p_intra + (total - intra) * spec.p_inter) / total
    return SyntheticSpec(p_intra=p, p_inter=p)


@pytest.fixture(scope="module")
def planted_run():
    bundle = generate(SyntheticSpec(), 42)
    kg = bundle.knowledge_graph()
    mc = ModelConfig(seed=42)
    t0 = time.perf_counter()
    params, report = train(kg, mc, TrainConfig(epochs=100, seed=42))
    elapsed = time.perf_counter() - t0
    return bundle, kg, mc, params, report, elapsed


class TestCriterion1Density:
    def test_density(self):
        d = graph_density(14951, 206850)
        verdict(1, abs(d - 0.001851) <= 5e-7, f"density {d:.7f} vs 0.001851 +/- 5e-7")


class TestCriterion2Split:
    def test_large_split(self):
        n_nodes, n_edges = 14951, 206850
        rng = np.random.default_rng(0)
        keys = np.empty(0, dtype=np.int64)
        while keys.size < n_edges:
            i, j = rng.integers(0, n_nodes, size=(2, n_edges))
            ok = i != j
            lo, hi = np.minimum(i[ok], j[ok]), np.maximum(i[ok], j[ok])
            keys = np.unique(np.r_[keys, lo * n_nodes + hi])
        keys = np.sort(rng.choice(keys, size=n_edges, replace=False))
        edges = np.stack([keys // n_nodes, keys % n_nodes], axis=1)
        g = ContextGraph("big", tuple(f"P{i:05d}" for i in range(n_nodes)), edges)

        t0 = time.perf_counter()
        split = split_edges({"big": g}, seed=42)
        elapsed = time.perf_counter() - t0

        def k(a):
            return a[:, 0] * n_nodes + a[:, 1]

        tr, va, te = k(split.train["big"]), k(split.valid["big"]), k(split.test["big"])
        vn, tn = k(split.valid_neg["big"]), k(split.test_neg["big"])
        counts = (tr.size, va.size, te.size)
        disjoint = np.intersect1d(tr, va).size == np.intersect1d(tr, te).size == np.intersect1d(va, te).size == 0
        complete = np.array_equal(np.sort(np.r_[tr, va, te]), keys)
        neg = np.r_[vn, tn]
        neg_ok = (vn.size == va.size and tn.size == te.size and np.unique(neg).size == neg.size
                  and not np.isin(neg, keys).any() and bool(np.all(split.valid_neg["big"][:, 0] < split.valid_neg["big"][:, 1])))
        ok = (counts == (165480, 20685, 20685) == split_counts(n_edges)
              and disjoint and complete and neg_ok and elapsed < 10)
        verdict(2, ok, f"counts {counts}, disjoint {disjoint}, union-complete {complete}, "
                       f"negatives clean {neg_ok}, {elapsed:.2f}s")


class TestCriterion3Gradients:
    def test_primitives_and_full_model(self):
        t0 = time.perf_counter()
        errors = {}
        for i, name in enumerate(sorted(PRIMITIVES)):
            f, x = PRIMITIVES[name](np.random.default_rng(i))
            errors[name] = ad.grad_check(f, x, eps=1e-5)

        kg = make_kg(
            [("a", "b"), ("b", "c"), ("c", "d"), ("a", "c"), ("d", "e"), ("e", "f"), ("f", "g"), ("c", "g")],
            {"s1": {"a", "b", "c", "d", "g"}, "s2": {"c", "d", "e", "f", "g"}},
            {"s1": "c1", "s2": "c1"},
            [("s1", "s2")],
        )
        assert kg.n_protein_representations <= 20 and len(kg.contexts) == 2
        cfg = ModelConfig(latent_dim=4, n_attention_heads=2, seed=3)
        params = init_params(cfg, kg)
        batch = make_batch(kg)
        inputs = LossInputs(np.array([0, 5]), np.array([1, 6]), np.array([0, 5]), np.array([4, 9]),
                            np.arange(10), np.array([0] * 5 + [1] * 5),
                            np.array([0, 9]), np.array([1, 0]))
        for name in params.names():
            def f(t, x, name=name):
                pvars = params_on_tape(t, params, trainable=False)
                pvars[name] = x
                return loss_on_tape(t, batch, pvars, cfg, inputs)[0]

            errors[f"model:{name}"] = ad.grad_check(f, params[name], eps=1e-5)
        elapsed = time.perf_counter() - t0
        worst = max(errors, key=errors.get)
        ok = errors[worst] < 1e-4 and elapsed < 30
        verdict(3, ok, f"{len(errors)} checks, max relative error {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")


class TestCriterion4Attention:
    def test_segments_sum_to_one(self):
        t0 = time.perf_counter()
        worst, n_segments = 0.0, 0
        stages = set()
        for seed in range(100):
            rng = np.random.default_rng(seed)
            kg = random_kg(rng, n_proteins=int(rng.integers(6, 20)), n_contexts=int(rng.integers(2, 5)),
                           n_celltypes=int(rng.integers(1, 3)))
            cfg = ModelConfig(latent_dim=6, n_attention_heads=int(rng.choice([1, 2, 3])),
                              n_protein_layers=int(rng.integers(1, 4)), seed=seed)
            t = ad.Tape()
            res = forward_on_tape(t, make_batch(kg), params_on_tape(t, init_params(cfg, kg), False), cfg)
            for stage, recs in res.attention.items():
                for alpha, seg in recs:
                    stages.add(stage)
                    present = np.bincount(seg) > 0
                    sums = np.bincount(seg, weights=alpha)[present]
                    worst = max(worst, float(np.max(np.abs(sums - 1))))
                    n_segments += int(present.sum())
        elapsed = time.perf_counter() - t0
        ok = worst <= 1e-9 and stages == {"protein", "bridge", "meta"} and elapsed < 30
        verdict(4, ok, f"{n_segments} segments over stages {sorted(stages)}, "
                       f"max |sum - 1| {worst:.1e}, {elapsed:.1f}s")


class TestCriterion5Planted:
    def test_planted_learns(self, planted_run):
        _, _, _, _, report, elapsed = planted_run
        auc = report.mean_test("auroc")
        verdict("5 (planted)", auc >= 0.85 and elapsed < 600,
                f"mean test AUROC {auc:.4f} (need >= 0.85), {elapsed:.0f}s")

    def test_control(self):
        spec = _matched_control(SyntheticSpec())
        kg = generate(spec, 42).knowledge_graph()
        t0 = time.perf_counter()
        _, report = train(kg, ModelConfig(seed=42), TrainConfig(epochs=100, seed=42))
        elapsed = time.perf_counter() - t0
        auc = report.mean_test("auroc")
        verdict("5 (control)", auc <= 0.6 and elapsed < 600,
                f"intra = inter = {spec.p_intra:.5f}, mean test AUROC {auc:.4f} (need <= 0.6), {elapsed:.0f}s")


class TestCriterion6Metrics:
    def test_oracles(self):
        rng = np.random.default_rng(6)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 51))
            if rng.random() < 0.5:
                s = rng.integers(0, int(rng.integers(2, 10)), size=n) / 3.0
            else:
                s = rng.random(n)
            y = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(int)
            for got, ref in ((auroc(s, y), auroc_pairs(list(s), list(y))),
                             (average_precision(s, y), ap_thresholds(list(s), list(y)))):
                assert (got is None) == (ref is None)
                if ref is not None:
                    worst = max(worst, abs(got - ref))
            ranked = [int(v) for v in y]
            for k in (1, 5, 10, 50):
                p, r, ap = ranking_prefix(ranked, k)
                worst = max(worst, abs(precision_at_k(ranked, k) - p))
                if r is not None:
                    worst = max(worst, abs(recall_at_k(ranked, k) - r), abs(ap_at_k(ranked, k) - ap))
        hand = ap_at_k([1, 0, 1, 1, 0, 0], 5)
        elapsed = time.perf_counter() - t0
        ok = worst <= 1e-12 and round(hand, 4) == 0.8056 and elapsed < 60
        verdict(6, ok, f"max deviation {worst:.1e} over 1000 trials, AP@5 hand case {hand:.4f}, {elapsed:.1f}s")


class TestCriterion7Finetune:
    def test_separability_and_leakage(self):
        t0 = time.perf_counter()
        bundle = generate(SyntheticSpec(), 42)
        kg = bundle.knowledge_graph()
        rng = np.random.default_rng(42)
        centroids = rng.normal(size=(bundle.spec.n_blocks, 16))
        rows = [centroids[bundle.block_of[p]] + rng.normal(scale=1.5, size=16)
                for cid in sorted(kg.contexts) for p in kg.contexts[cid].nodes]
        table = EmbeddingTable({c: g.nodes for c, g in kg.contexts.items()}, np.array(rows),
                               (), np.empty((0, 16)))
        labels = RiskLabelSet.from_mapping(bundle.labels)
        ds = build_finetune_dataset(table, labels)
        res = train_mlp(ds, MlpConfig(), seed=42)
        per = evaluate_contexts(table, res.params, labels, res.split.test_genes)
        auprc = _mean(per, "auprc")
        train_side = set(ds.subset(res.split.train_genes).genes)
        test_side = set(ds.subset(res.split.test_genes).genes)
        leaks = len(train_side & test_side) + len(res.split.train_genes & res.split.test_genes)
        elapsed = time.perf_counter() - t0
        ok = auprc >= 0.9 and leaks == 0 and elapsed < 60
        verdict(7, ok, f"mean held-out AUPRC {auprc:.4f} over {len(per)} contexts, "
                       f"{leaks} leaked genes, {elapsed:.1f}s")


class TestCriterion8Compare:
    def test_arithmetic(self):
        keys = ("ap5", "ap10", "auprc", "auroc", "p5", "p10", "r5", "r10")
        a = {f"c{i:02d}": {k: 0.9 if i < 34 else 0.1 for k in keys} for i in range(48)}
        b = {f"c{i:02d}": {k: 0.5 for k in keys} for i in range(48)}
        pct = compare_models(a, b).percentage("auroc")
        verdict("8 (arithmetic)", f"{pct:.2f}" == "70.83", f"34 of 48 gives {pct:.2f}%")

    def test_planted_comparison(self, planted_run):
        bundle, kg, mc, params, report, _ = planted_run
        t0 = time.perf_counter()
        table = embed(kg, params, mc, report.split)
        labels = RiskLabelSet.from_mapping(bundle.labels)
        rw = replicate_into_contexts(random_walk_embeddings(kg.global_ppi, table.dim, 42), table)
        ours = train_mlp(build_finetune_dataset(table, labels), MlpConfig(), seed=42)
        theirs = train_mlp(build_finetune_dataset(rw, labels), MlpConfig(), seed=42)
        assert ours.split == theirs.split
        m_ours = evaluate_contexts(table, ours.params, labels, ours.split.test_genes)
        m_rw = evaluate_contexts(rw, theirs.params, labels, theirs.split.test_genes)
        a, b = _mean(m_ours, "auprc"), _mean(m_rw, "auprc")
        elapsed = time.perf_counter() - t0
        verdict("8 (planted)", a > b and elapsed < 300,
                f"mean AUPRC contextual {a:.4f} vs random walk {b:.4f}, {elapsed:.1f}s after pretraining")


class TestCriterion9Similarity:
    def test_properties(self, small_bundle):
        kg = small_bundle.knowledge_graph()
        cfg = ModelConfig(latent_dim=8, seed=9)
        table = forward(kg, init_params(cfg, kg), cfg)
        mats = [cell_similarity(table)]
        mats += [protein_context_similarity(g, table) for g in table.genes if len(table.contexts_of(g)) > 1]
        worst = max(max(float(np.max(np.abs(m.values - m.values.T))), float(np.max(np.abs(np.diag(m.values) - 1))))
                    for m in mats)
        rng = np.random.default_rng(9)
        scale_err = 0.0
        for _ in range(1000):
            u, v = rng.normal(size=8), rng.normal(size=8)
            a, b = rng.uniform(1e-3, 1e3, size=2)
            scale_err = max(scale_err, abs(cosine(a * u, b * v) - cosine(u, v)))
        ok = worst <= 1e-9 and scale_err <= 1e-12
        verdict(9, ok, f"{len(mats)} matrices, max asymmetry/diagonal error {worst:.1e}, "
                       f"cosine scale error {scale_err:.1e}")


class TestCriterion10Determinism:
    # default synthetic spec and schedule: 500 proteins, 8 contexts, 100 epochs
    ARGS = ["--seed", "42", "--threads", "1"]

    def _pipeline(self, out):
        for cmd in ("synth", "pretrain", "finetune", "analyze"):
            assert main([cmd, "--out", str(out)] + self.ARGS) == 0, cmd

    def test_byte_identical_runs(self, tmp_path):
        t0 = time.perf_counter()
        self._pipeline(tmp_path / "a")
        self._pipeline(tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        other = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]

        ckpt_path = tmp_path / "a" / "pretrain" / "model.ckpt"
        raw = ckpt_path.read_bytes()
        ckpt = load_checkpoint(ckpt_path)
        round_trip = dumps(ckpt) == raw and loads(dumps(ckpt)).equals(ckpt)
        rejected = 0
        for pos in (3, 40, len(raw) // 2, len(raw) - 2):
            bad = bytearray(raw)
            bad[pos] ^= 0x10
            try:
                loads(bytes(bad))
            except CorruptCheckpoint:
                rejected += 1
        try:
            loads(raw[:-9])
        except CorruptCheckpoint:
            rejected += 1
        elapsed = time.perf_counter() - t0
        ok = files == other and not differing and round_trip and rejected == 5 and elapsed < 1200
        verdict(10, ok, f"{len(files)} files, {len(differing)} differ {differing[:3]}, "
                        f"checkpoint round-trip bit-exact {round_trip}, {rejected}/5 corruptions rejected, "
                        f"{elapsed:.0f}s")


class TestCriterion11Bookkeeping:
    def test_protein_entries(self, toy_kg, small_bundle):
        graphs = [toy_kg, small_bundle.knowledge_graph(), generate(SyntheticSpec(), 42).knowledge_graph()]
        graphs += [random_kg(np.random.default_rng(s), n_contexts=3, n_celltypes=2) for s in range(50)]
        bad = 0
        for kg in graphs:
            cfg = ModelConfig(latent_dim=4)
            table = forward(kg, init_params(cfg, kg), cfg)
            expect = sum(g.n_nodes for g in kg.contexts.values())
            if not (table.n_protein_entries == expect == kg.n_protein_representations
                    == summarize(kg).total_protein_representations):
                bad += 1
        verdict(11, bad == 0, f"{len(graphs)} graphs, {bad} with mismatched protein-entry counts")
