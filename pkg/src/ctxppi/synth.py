"""Planted-structure benchmark bundles.

A protein universe is partitioned into blocks. A global interaction network
is drawn as a stochastic block model (``p_intra`` within a block,
``p_inter`` across). Each subtype switches on ``blocks_per_context`` randomly
chosen blocks (members activated at ``activation_rate``, everything else at
``background_rate``); with ``blocks_per_context=None`` every protein is
activated at ``activation_rate`` instead. A subtype's contextual graph is
the induced subgraph, exactly as for real data. The risk genes are members
of one planted block; negatives are drawn uniformly from the rest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import SpecError
from .kg import DegRecord, GlobalPPI, LrRecord, build_knowledge_graph


@dataclass(frozen=True)
class SyntheticSpec:
    n_proteins: int = 500
    n_contexts: int = 8
    n_blocks: int = 8
    p_intra: float = 0.15
    p_inter: float = 0.01
    activation_rate: float = 0.8
    blocks_per_context: int | None = 3
    background_rate: float = 0.05
    risk_block: int = 0
    n_positive: int = 40
    n_negative: int = 40
    n_celltypes: int = 2
    p_metagraph: float = 0.3
    min_nodes: int = 10

    def validate(self):
        for name in ("p_intra", "p_inter", "activation_rate", "background_rate", "p_metagraph"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {v}")
        if self.p_intra < self.p_inter:
            raise SpecError("p_intra must not be below p_inter")
        if self.n_proteins < 2 or self.n_contexts < 1 or self.n_celltypes < 1:
            raise SpecError("need at least 2 proteins, 1 context and 1 cell type")
        if not 1 <= self.n_blocks <= self.n_proteins:
            raise SpecError(f"n_blocks must lie in [1, n_proteins], got {self.n_blocks}")
        if self.blocks_per_context is not None and not 1 <= self.blocks_per_context <= self.n_blocks:
            raise SpecError(f"blocks_per_context must lie in [1, n_blocks], got {self.blocks_per_context}")
        if not 0 <= self.risk_block < self.n_blocks:
            raise SpecError(f"risk_block {self.risk_block} outside 0..{self.n_blocks - 1}")
        block_size = len(_blocks(self.n_proteins, self.n_blocks)[self.risk_block])
        if self.n_positive > block_size:
            raise SpecError(f"{self.n_positive} positives requested from a block of {block_size}")
        if self.n_negative > self.n_proteins - block_size:
            raise SpecError(f"{self.n_negative} negatives requested from {self.n_proteins - block_size} candidates")
        if self.n_positive < 1 or self.n_negative < 1:
            raise SpecError("label counts must be positive")

    @property
    def planted(self):
        return self.p_intra > self.p_inter


def _blocks(n, k):
    return np.array_split(np.arange(n), k)


@dataclass
class SyntheticBundle:
    spec: SyntheticSpec
    seed: int
    global_ppi: GlobalPPI
    deg_records: list
    lr_records: list
    hierarchy: dict
    labels: dict
    block_of: dict
    activated: dict

    def knowledge_graph(self):
        kg, _ = build_knowledge_graph(
            self.global_ppi, self.deg_records, self.lr_records, self.hierarchy,
            min_nodes=self.spec.min_nodes,
        )
        return kg

    def ground_truth(self):
        return {
            "spec": asdict(self.spec),
            "seed": self.seed,
            "risk_block": self.spec.risk_block,
            "block_of": dict(sorted(self.block_of.items())),
            "labels": dict(sorted(self.labels.items())),
            "activated": {c: sorted(g) for c, g in sorted(self.activated.items())},
        }

    def write(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "global_ppi.tsv", "w") as fh:
            fh.write("# protein_a\tprotein_b\n")
            for a, b in sorted(self.global_ppi.edges):
                fh.write(f"{a}\t{b}\n")
        with open(d / "deg.tsv", "w") as fh:
            fh.write("context\tgene\tavg_fc\tadj_p\tpct_expressed\n")
            for r in self.deg_records:
                fh.write(f"{r.context_id}\t{r.gene}\t{r.avg_fc!r}\t{r.adj_p!r}\t{r.pct_expressed!r}\n")
        with open(d / "lr.tsv", "w") as fh:
            fh.write("source\ttarget\tligand\treceptor\taggregate_rank\n")
            for r in self.lr_records:
                fh.write(f"{r.source_subtype}\t{r.target_subtype}\t{r.ligand}\t{r.receptor}\t{r.aggregate_rank!r}\n")
        with open(d / "hierarchy.tsv", "w") as fh:
            for s in sorted(self.hierarchy):
                fh.write(f"{s}\t{self.hierarchy[s]}\n")
        with open(d / "labels.tsv", "w") as fh:
            fh.write("gene\tlabel\n")
            for g, lab in sorted(self.labels.items()):
                fh.write(f"{g}\t{lab}\n")
        ctx_dir = d / "contexts"
        ctx_dir.mkdir(exist_ok=True)
        kg = self.knowledge_graph()
        for cid, g in kg.contexts.items():
            with open(ctx_dir / f"{cid}.tsv", "w") as fh:
                fh.write("# protein_a\tprotein_b\n")
                for a, b in g.edges:
                    fh.write(f"{g.nodes[a]}\t{g.nodes[b]}\n")
        with open(d / "ground_truth.json", "w") as fh:
            fh.write(json.dumps(self.ground_truth(), indent=2) + "\n")


def _sbm_edges(rng, block_of, p_intra, p_inter):
    n = len(block_of)
    iu, ju = np.triu_indices(n, k=1)
    same = block_of[iu] == block_of[ju]
    prob = np.where(same, p_intra, p_inter)
    keep = rng.random(iu.size) < prob
    return iu[keep], ju[keep]


def generate(spec, seed):
    spec.validate()
    rng = np.random.default_rng(seed)
    width = len(str(spec.n_proteins - 1))
    proteins = [f"P{i:0{width}d}" for i in range(spec.n_proteins)]
    perm = rng.permutation(spec.n_proteins)
    block_of = np.empty(spec.n_proteins, dtype=np.int64)
    for b, members in enumerate(_blocks(spec.n_proteins, spec.n_blocks)):
        block_of[perm[members]] = b

    iu, ju = _sbm_edges(rng, block_of, spec.p_intra, spec.p_inter)
    global_ppi = GlobalPPI(tuple(proteins), frozenset((proteins[a], proteins[b]) for a, b in zip(iu, ju)))

    cw = len(str(spec.n_contexts - 1))
    contexts = [f"sub{c:0{cw}d}" for c in range(spec.n_contexts)]
    celltypes = [f"cell{k}" for k in range(spec.n_celltypes)]
    hierarchy = {c: celltypes[i % spec.n_celltypes] for i, c in enumerate(contexts)}

    deg, activated = [], {}
    for cid in contexts:
        if spec.blocks_per_context is None:
            on = rng.random(spec.n_proteins) < spec.activation_rate
        else:
            chosen = rng.choice(spec.n_blocks, size=spec.blocks_per_context, replace=False)
            rate = np.where(np.isin(block_of, chosen), spec.activation_rate, spec.background_rate)
            on = rng.random(spec.n_proteins) < rate
        activated[cid] = {proteins[i] for i in np.flatnonzero(on)}
        for i in range(spec.n_proteins):
            if on[i]:
                up = rng.random() < 0.5
                fc = rng.uniform(1.25, 3.0) if up else rng.uniform(0.2, 0.75)
                p = rng.uniform(1e-6, 0.04)
                pct = rng.uniform(0.08, 0.9)
            elif rng.random() < 0.2:
                # distractor rows that fail exactly one threshold
                fc, p, pct = 1.5, 0.01, 0.5
                which = rng.integers(3)
                if which == 0:
                    fc = rng.uniform(0.85, 1.15)
                elif which == 1:
                    p = rng.uniform(0.06, 1.0)
                else:
                    pct = rng.uniform(0.0, 0.05)
            else:
                continue
            deg.append(DegRecord(cid, proteins[i], float(fc), float(p), float(pct)))

    lr = []
    for a in range(spec.n_contexts):
        for b in range(spec.n_contexts):
            if a == b:
                continue
            linked = rng.random() < spec.p_metagraph
            rank = rng.uniform(0.0, 0.05) if linked else rng.uniform(0.06, 1.0)
            lig, rec = rng.integers(spec.n_proteins, size=2)
            lr.append(LrRecord(contexts[a], contexts[b], proteins[lig], proteins[rec], float(rank)))

    risk = perm[_blocks(spec.n_proteins, spec.n_blocks)[spec.risk_block]]
    others = np.setdiff1d(np.arange(spec.n_proteins), risk)
    pos = rng.choice(np.sort(risk), size=spec.n_positive, replace=False)
    neg = rng.choice(others, size=spec.n_negative, replace=False)
    labels = {proteins[i]: 1 for i in pos}
    labels.update({proteins[i]: 0 for i in neg})

    return SyntheticBundle(
        spec=spec,
        seed=seed,
        global_ppi=global_ppi,
        deg_records=deg,
        lr_records=lr,
        hierarchy=hierarchy,
        labels=labels,
        block_of={proteins[i]: int(block_of[i]) for i in range(spec.n_proteins)},
        activated=activated,
    )
