import numpy as np
import pytest

from ctxppi.kg import GlobalPPI, KnowledgeGraph, assemble_metagraph, build_context_ppi
from ctxppi.synth import SyntheticSpec, generate


def make_kg(global_edges, activated, hierarchy, subtype_edges=(), proteins=None):
    """Knowledge graph from plain Python pieces; contexts keep their LCC."""
    ppi = GlobalPPI.from_edges(global_edges, proteins=proteins)
    contexts = {c: build_context_ppi(ppi, c, genes, min_nodes=1) for c, genes in activated.items()}
    return KnowledgeGraph(ppi, contexts, assemble_metagraph(subtype_edges, hierarchy))


def random_kg(rng, n_proteins=14, n_contexts=2, p=0.35, n_celltypes=1):
    """Small random two-level graph; every context keeps at least 2 nodes."""
    names = [f"g{i:02d}" for i in range(n_proteins)]
    edges = [(names[i], names[i + 1]) for i in range(n_proteins - 1)]
    for i in range(n_proteins):
        for j in range(i + 2, n_proteins):
            if rng.random() < p:
                edges.append((names[i], names[j]))
    subtypes = [f"s{k}" for k in range(n_contexts)]
    activated = {}
    for s in subtypes:
        lo = int(rng.integers(0, n_proteins // 2))
        hi = int(rng.integers(lo + 2, n_proteins + 1))
        activated[s] = set(names[lo:hi])
    hierarchy = {s: f"c{k % n_celltypes}" for k, s in enumerate(subtypes)}
    sub_edges = [(a, b) for i, a in enumerate(subtypes) for b in subtypes[i + 1:] if rng.random() < 0.5]
    return make_kg(edges, activated, hierarchy, sub_edges, proteins=names)


@pytest.fixture
def toy_kg():
    """Two contexts over a 12-protein network: a triangle-rich block and a path."""
    edges = [
        ("A", "B"), ("B", "C"), ("A", "C"), ("C", "D"), ("D", "E"), ("E", "F"),
        ("F", "G"), ("G", "H"), ("H", "I"), ("I", "J"), ("J", "K"), ("K", "L"),
        ("A", "D"), ("G", "I"),
    ]
    activated = {
        "s1": {"A", "B", "C", "D", "E", "F", "G"},
        "s2": {"D", "E", "F", "G", "H", "I", "J", "K", "L"},
    }
    return make_kg(edges, activated, {"s1": "c1", "s2": "c1"}, [("s1", "s2")])


@pytest.fixture(scope="session")
def small_bundle():
    spec = SyntheticSpec(n_proteins=160, n_contexts=4, n_blocks=4, blocks_per_context=2,
                         n_positive=15, n_negative=15)
    return generate(spec, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
