import json

import numpy as np
import pytest

from ctxppi.errors import SpecError
from ctxppi.kg import (
    build_knowledge_graph, read_deg_table, read_global_ppi, read_hierarchy, read_lr_table,
)
from ctxppi.synth import SyntheticSpec, generate


class TestGenerate:
    def test_small_bundle_layout(self, tmp_path):
        spec = SyntheticSpec(n_proteins=200, n_contexts=4, n_blocks=4, blocks_per_context=2,
                             n_positive=20, n_negative=20)
        b = generate(spec, 1)
        b.write(tmp_path)
        assert len(list((tmp_path / "contexts").glob("*.tsv"))) == 4
        labels = b.labels
        assert sum(labels.values()) == 20 and len(labels) == 40
        truth = json.loads((tmp_path / "ground_truth.json").read_text())
        assert truth["seed"] == 1 and truth["risk_block"] == 0
        for g, y in labels.items():
            assert (truth["block_of"][g] == 0) == bool(y)

    def test_same_seed_same_bytes(self, tmp_path):
        spec = SyntheticSpec(n_proteins=120, n_contexts=3, n_blocks=3, blocks_per_context=1,
                             n_positive=10, n_negative=10)
        generate(spec, 5).write(tmp_path / "a")
        generate(spec, 5).write(tmp_path / "b")
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_planted_block_density(self):
        b = generate(SyntheticSpec(n_proteins=300, n_contexts=2, n_blocks=3), 0)
        blk = b.block_of
        intra = sum(blk[x] == blk[y] for x, y in b.global_ppi.edges)
        inter = len(b.global_ppi.edges) - intra
        n_intra_pairs = 3 * 100 * 99 / 2
        n_inter_pairs = 300 * 299 / 2 - n_intra_pairs
        assert intra / n_intra_pairs > 5 * inter / n_inter_pairs

    def test_control_has_no_planted_structure(self):
        spec = SyntheticSpec(n_proteins=300, n_contexts=2, n_blocks=3, p_intra=0.05, p_inter=0.05)
        assert not spec.planted
        b = generate(spec, 0)
        blk = b.block_of
        intra = sum(blk[x] == blk[y] for x, y in b.global_ppi.edges)
        rate_in = intra / (3 * 100 * 99 / 2)
        rate_out = (len(b.global_ppi.edges) - intra) / (300 * 299 / 2 - 3 * 100 * 99 / 2)
        assert abs(rate_in - rate_out) < 0.01

    def test_knowledge_graph_matches_activation(self):
        b = generate(SyntheticSpec(n_proteins=150, n_contexts=3, n_blocks=3, blocks_per_context=1,
                                   n_positive=10, n_negative=10), 2)
        kg = b.knowledge_graph()
        for cid, g in kg.contexts.items():
            assert set(g.nodes) <= b.activated[cid]

    def test_round_trip_through_files(self, tmp_path):
        b = generate(SyntheticSpec(n_proteins=120, n_contexts=3, n_blocks=3, blocks_per_context=1,
                                   n_positive=10, n_negative=10), 3)
        b.write(tmp_path)
        kg, _ = build_knowledge_graph(
            read_global_ppi(tmp_path / "global_ppi.tsv"), read_deg_table(tmp_path / "deg.tsv"),
            read_lr_table(tmp_path / "lr.tsv"), read_hierarchy(tmp_path / "hierarchy.tsv"),
        )
        direct = b.knowledge_graph()
        assert kg.contexts.keys() == direct.contexts.keys()
        for cid in kg.contexts:
            assert kg.contexts[cid].nodes == direct.contexts[cid].nodes
            assert np.array_equal(kg.contexts[cid].edges, direct.contexts[cid].edges)


class TestSpecErrors:
    @pytest.mark.parametrize("kw", [
        {"p_intra": 1.5},
        {"p_intra": 0.01, "p_inter": 0.2},
        {"n_blocks": 0},
        {"blocks_per_context": 9},
        {"risk_block": 8},
        {"n_positive": 1000},
        {"n_negative": 0},
        {"n_proteins": 1, "n_blocks": 1},
    ])
    def test_rejected(self, kw):
        with pytest.raises(SpecError):
            generate(SyntheticSpec(**kw), 0)
