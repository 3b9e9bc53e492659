"""Two-level knowledge graph: a global protein interaction network, one
induced interaction graph per cell subtype, and a metagraph of subtypes and
their parent cell types.

Construction follows the thresholds used for the Alzheimer brain atlas:
a gene is activated in a subtype when it is differentially expressed
(fold change >= 1.2 or <= 0.8, adjusted p <= 0.05, detected in more than 5%
of cells), and two subtypes are linked when any ligand-receptor interaction
between them has an aggregate rank <= 0.05.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ContextRejected, DegenerateGraph, MissingParent, ParseError

log = logging.getLogger(__name__)

FC_UP = 1.2
FC_DOWN = 0.8
MAX_ADJ_P = 0.05
MIN_PCT_EXPRESSED = 0.05
LR_RANK_THRESHOLD = 0.05
DEFAULT_MIN_NODES = 10

DEG_COLUMNS = ("context", "gene", "avg_fc", "adj_p", "pct_expressed")
LR_COLUMNS = ("source", "target", "ligand", "receptor", "aggregate_rank")


def _pair(a, b):
    return (a, b) if a <= b else (b, a)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GlobalPPI:
    proteins: tuple
    edges: frozenset

    def __post_init__(self):
        proteins = tuple(self.proteins)
        if len(set(proteins)) != len(proteins):
            raise ValueError("duplicate protein identifiers")
        known = set(proteins)
        edges = set()
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop on {a!r}")
            if a not in known or b not in known:
                raise ValueError(f"edge ({a!r}, {b!r}) has an unlisted endpoint")
            edges.add(_pair(a, b))
        object.__setattr__(self, "proteins", proteins)
        object.__setattr__(self, "edges", frozenset(edges))

    @classmethod
    def from_edges(cls, pairs, proteins=None):
        """Build from an iterable of pairs; self-loops and repeats are dropped."""
        edges = {_pair(a, b) for a, b in pairs if a != b}
        if proteins is None:
            proteins = sorted({p for e in edges for p in e})
        return cls(tuple(proteins), frozenset(edges))

    @cached_property
    def index(self):
        return {p: i for i, p in enumerate(self.proteins)}

    @property
    def n_proteins(self):
        return len(self.proteins)

    @property
    def n_edges(self):
        return len(self.edges)

    def edge_array(self):
        """Edges as an (m, 2) array of protein indices, i < j, sorted."""
        idx = self.index
        arr = np.array(
            sorted(_pair(idx[a], idx[b]) for a, b in self.edges), dtype=np.int64
        ).reshape(-1, 2)
        return arr


@dataclass(frozen=True)
class ContextGraph:
    """Interaction graph of one subtype, reindexed densely 0..n-1.

    ``nodes`` follows the global protein order; ``edges`` holds local index
    pairs (i < j) in lexicographic order.
    """

    context_id: str
    nodes: tuple
    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", edges)

    @cached_property
    def node_index(self):
        return {p: i for i, p in enumerate(self.nodes)}

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_edges(self):
        return len(self.edges)

    def edge_set(self):
        return {(int(a), int(b)) for a, b in self.edges}

    def protein_edges(self):
        """Edges as protein-id pairs, normalized like :class:`GlobalPPI` edges."""
        return {_pair(self.nodes[a], self.nodes[b]) for a, b in self.edges}

    def is_connected(self):
        if self.n_nodes == 0:
            return False
        n_comp, _ = _components(self.n_nodes, self.edges)
        return n_comp == 1

    def __eq__(self, other):
        if not isinstance(other, ContextGraph):
            return NotImplemented
        return (
            self.context_id == other.context_id
            and self.nodes == other.nodes
            and np.array_equal(self.edges, other.edges)
        )

    __hash__ = None


@dataclass(frozen=True)
class Metagraph:
    subtypes: tuple
    celltypes: tuple
    subtype_edges: frozenset
    hierarchy: dict = field(hash=False)

    @cached_property
    def nodes(self):
        return self.subtypes + self.celltypes

    @cached_property
    def node_index(self):
        return {n: i for i, n in enumerate(self.nodes)}

    @property
    def hierarchy_edges(self):
        return [(s, self.hierarchy[s]) for s in self.subtypes]

    def edge_array(self):
        """All undirected metagraph edges as node-index pairs: subtype-subtype
        edges first (sorted), then one hierarchy edge per subtype."""
        idx = self.node_index
        sub = sorted((idx[a], idx[b]) for a, b in self.subtype_edges)
        hier = [(idx[s], idx[c]) for s, c in self.hierarchy_edges]
        return np.array(sub + hier, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class DegRecord:
    context_id: str
    gene: str
    avg_fc: float
    adj_p: float
    pct_expressed: float

    def __post_init__(self):
        for name in ("avg_fc", "adj_p", "pct_expressed"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")
        if not self.avg_fc > 0:
            raise ValueError(f"avg_fc must be > 0, got {self.avg_fc}")
        if not 0.0 <= self.adj_p <= 1.0:
            raise ValueError(f"adj_p must lie in [0, 1], got {self.adj_p}")
        if not 0.0 <= self.pct_expressed <= 1.0:
            raise ValueError(f"pct_expressed must lie in [0, 1], got {self.pct_expressed}")


@dataclass(frozen=True)
class LrRecord:
    source_subtype: str
    target_subtype: str
    ligand: str
    receptor: str
    aggregate_rank: float

    def __post_init__(self):
        if not 0.0 <= self.aggregate_rank <= 1.0:
            raise ValueError(f"aggregate_rank must lie in [0, 1], got {self.aggregate_rank}")


@dataclass(frozen=True)
class DataSummary:
    n_proteins: int
    n_edges: int
    global_density: float
    n_subtypes: int
    n_celltypes: int
    n_unique_proteins_in_contexts: int
    total_protein_representations: int
    context_density_range: tuple

    def to_json(self):
        d = asdict(self)
        d["context_density_range"] = list(self.context_density_range)
        return json.dumps(d, indent=2) + "\n"


@dataclass(frozen=True)
class KnowledgeGraph:
    global_ppi: GlobalPPI
    contexts: dict
    metagraph: Metagraph

    def __post_init__(self):
        ordered = {cid: self.contexts[cid] for cid in sorted(self.contexts)}
        object.__setattr__(self, "contexts", ordered)
        subtypes = set(self.metagraph.subtypes)
        for cid in ordered:
            if cid not in subtypes:
                raise MissingParent(cid)

    @property
    def context_ids(self):
        return list(self.contexts)

    def activated(self, context_id):
        return set(self.contexts[context_id].nodes)

    @property
    def n_protein_representations(self):
        return sum(g.n_nodes for g in self.contexts.values())


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _data_lines(path):
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, line.rstrip("\r\n")


def _read_table(path, columns):
    """Yield (row_number, dict) for a headed table.

    Tab-separated; a comma-separated file is accepted when the header
    contains no tab.
    """
    lines = _data_lines(path)
    try:
        lineno, header_line = next(lines)
    except StopIteration:
        raise ParseError("file is empty (missing header)", path=path) from None
    delim = "\t" if "\t" in header_line else ","
    header = [h.strip() for h in next(csv.reader([header_line], delimiter=delim))]
    missing = [c for c in columns if c not in header]
    if missing:
        raise ParseError(f"header lacks columns {missing}", path=path, row=lineno)
    pos = [header.index(c) for c in columns]
    for lineno, line in lines:
        cells = next(csv.reader([line], delimiter=delim))
        if len(cells) < len(header):
            raise ParseError(
                f"expected {len(header)} fields, found {len(cells)}", path=path, row=lineno
            )
        yield lineno, {c: cells[p].strip() for c, p in zip(columns, pos)}


def read_global_ppi(path):
    pairs = []
    for lineno, line in _data_lines(path):
        cells = line.split("\t")
        if len(cells) < 2 or not cells[0].strip() or not cells[1].strip():
            raise ParseError("expected protein_a<TAB>protein_b", path=path, row=lineno)
        pairs.append((cells[0].strip(), cells[1].strip()))
    n_self = sum(1 for a, b in pairs if a == b)
    if n_self:
        log.warning("%s: dropped %d self-loops", path, n_self)
    return GlobalPPI.from_edges(pairs)


def read_deg_table(path):
    records = []
    for lineno, row in _read_table(path, DEG_COLUMNS):
        try:
            records.append(
                DegRecord(
                    row["context"],
                    row["gene"],
                    float(row["avg_fc"]),
                    float(row["adj_p"]),
                    float(row["pct_expressed"]),
                )
            )
        except ValueError as exc:
            raise ParseError(str(exc), path=path, row=lineno) from None
    return records


def read_lr_table(path):
    records = []
    for lineno, row in _read_table(path, LR_COLUMNS):
        try:
            records.append(
                LrRecord(
                    row["source"],
                    row["target"],
                    row["ligand"],
                    row["receptor"],
                    float(row["aggregate_rank"]),
                )
            )
        except ValueError as exc:
            raise ParseError(str(exc), path=path, row=lineno) from None
    return records


def read_hierarchy(path):
    hierarchy = {}
    for lineno, line in _data_lines(path):
        cells = [c.strip() for c in line.split("\t")]
        if len(cells) < 2 or not cells[0] or not cells[1]:
            raise ParseError("expected subtype<TAB>celltype", path=path, row=lineno)
        sub, cell = cells[0], cells[1]
        if sub == "subtype" and cell == "celltype":
            continue
        if sub in hierarchy and hierarchy[sub] != cell:
            raise ParseError(f"subtype {sub!r} listed under two cell types", path=path, row=lineno)
        hierarchy[sub] = cell
    return hierarchy


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def passes_deg_filter(rec, fc_up=FC_UP, fc_down=FC_DOWN, max_adj_p=MAX_ADJ_P,
                      min_pct=MIN_PCT_EXPRESSED):
    return (
        (rec.avg_fc >= fc_up or rec.avg_fc <= fc_down)
        and rec.adj_p <= max_adj_p
        and rec.pct_expressed > min_pct
    )


def select_activated_genes(deg_table, fc_up=FC_UP, fc_down=FC_DOWN, max_adj_p=MAX_ADJ_P,
                           min_pct=MIN_PCT_EXPRESSED):
    """Map each context to its set of differentially expressed genes.

    Every context present in the table gets an entry, possibly empty.
    """
    out = {}
    for rec in deg_table:
        genes = out.setdefault(rec.context_id, set())
        if passes_deg_filter(rec, fc_up, fc_down, max_adj_p, min_pct):
            genes.add(rec.gene)
    return out


def _components(n, edges):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    adj = coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)
    )
    return connected_components(adj, directed=False)


def build_context_ppi(global_ppi, context_id, activated, min_nodes=DEFAULT_MIN_NODES):
    """Induced subgraph of ``global_ppi`` on ``activated``, reduced to its
    largest connected component.

    Genes missing from the global network are dropped. Among equally large
    components the one holding the earliest protein (global order) wins.
    """
    index = global_ppi.index
    known = sorted((index[g] for g in activated if g in index))
    n_unknown = len(set(activated)) - len(known)
    if n_unknown:
        log.warning("context %s: dropped %d genes absent from the global PPI",
                    context_id, n_unknown)
    if not known:
        if min_nodes > 0:
            raise ContextRejected(context_id, 0)
        return ContextGraph(context_id, (), np.empty((0, 2), dtype=np.int64))

    local = {g: i for i, g in enumerate(known)}
    pairs = []
    for a, b in global_ppi.edges:
        ia, ib = index[a], index[b]
        if ia in local and ib in local:
            pairs.append(_pair(local[ia], local[ib]))
    n_comp, labels = _components(len(known), pairs)
    if n_comp > 1:
        sizes = np.bincount(labels)
        best = int(np.flatnonzero(sizes == sizes.max())[0])
        keep = np.flatnonzero(labels == best)
    else:
        keep = np.arange(len(known))
    if len(keep) < min_nodes:
        raise ContextRejected(context_id, int(len(keep)))

    remap = {int(old): new for new, old in enumerate(keep)}
    edges = sorted(
        _pair(remap[a], remap[b]) for a, b in pairs if a in remap and b in remap
    )
    nodes = tuple(global_ppi.proteins[known[i]] for i in keep)
    return ContextGraph(context_id, nodes, np.array(edges, dtype=np.int64).reshape(-1, 2))


def select_lr_edges(lr_table, threshold=LR_RANK_THRESHOLD):
    """Undirected subtype pairs supported by at least one interaction with
    aggregate rank <= threshold."""
    edges = set()
    for rec in lr_table:
        if rec.source_subtype == rec.target_subtype:
            continue
        if rec.aggregate_rank <= threshold:
            edges.add(_pair(rec.source_subtype, rec.target_subtype))
    return edges


def assemble_metagraph(subtype_edges, hierarchy):
    edges = set()
    for a, b in subtype_edges:
        for s in (a, b):
            if s not in hierarchy:
                raise MissingParent(s)
        if a != b:
            edges.add(_pair(a, b))
    subtypes = tuple(sorted(hierarchy))
    celltypes = tuple(sorted(set(hierarchy.values())))
    overlap = set(subtypes) & set(celltypes)
    if overlap:
        raise ValueError(f"names used both as subtype and cell type: {sorted(overlap)}")
    return Metagraph(subtypes, celltypes, frozenset(edges), dict(hierarchy))


def graph_density(n_nodes, n_edges):
    if n_nodes < 2:
        raise DegenerateGraph(f"density needs at least 2 nodes, got {n_nodes}")
    return 2.0 * n_edges / (n_nodes * (n_nodes - 1))


def build_knowledge_graph(global_ppi, deg_table, lr_table, hierarchy,
                          min_nodes=DEFAULT_MIN_NODES, lr_threshold=LR_RANK_THRESHOLD):
    """Run the whole construction. Returns ``(kg, rejected)`` where
    ``rejected`` maps context id to the size of its too-small component."""
    activated = select_activated_genes(deg_table)
    for cid in activated:
        if cid not in hierarchy:
            raise MissingParent(cid)
    contexts, rejected = {}, {}
    for cid in sorted(activated):
        try:
            contexts[cid] = build_context_ppi(global_ppi, cid, activated[cid], min_nodes)
        except ContextRejected as exc:
            log.warning("%s", exc)
            rejected[cid] = exc.size
    metagraph = assemble_metagraph(select_lr_edges(lr_table, lr_threshold), hierarchy)
    return KnowledgeGraph(global_ppi, contexts, metagraph), rejected


def summarize(kg):
    densities = [
        graph_density(g.n_nodes, g.n_edges) for g in kg.contexts.values() if g.n_nodes >= 2
    ]
    unique = set()
    for g in kg.contexts.values():
        unique.update(g.nodes)
    return DataSummary(
        n_proteins=kg.global_ppi.n_proteins,
        n_edges=kg.global_ppi.n_edges,
        global_density=graph_density(kg.global_ppi.n_proteins, kg.global_ppi.n_edges),
        n_subtypes=len(kg.metagraph.subtypes),
        n_celltypes=len(kg.metagraph.celltypes),
        n_unique_proteins_in_contexts=len(unique),
        total_protein_representations=kg.n_protein_representations,
        context_density_range=(min(densities), max(densities)) if densities else (None, None),
    )


# ---------------------------------------------------------------------------
# Bundle persistence
# ---------------------------------------------------------------------------


def write_bundle(kg, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "global_ppi.tsv", "w") as fh:
        fh.write("# protein_a\tprotein_b\n")
        for a, b in sorted(kg.global_ppi.edges):
            fh.write(f"{a}\t{b}\n")
    with open(d / "proteins.tsv", "w") as fh:
        for p in kg.global_ppi.proteins:
            fh.write(f"{p}\n")
    with open(d / "context_nodes.tsv", "w") as fh:
        fh.write("context\tprotein\n")
        for cid, g in kg.contexts.items():
            for p in g.nodes:
                fh.write(f"{cid}\t{p}\n")
    with open(d / "context_edges.tsv", "w") as fh:
        fh.write("context\tprotein_a\tprotein_b\n")
        for cid, g in kg.contexts.items():
            for a, b in g.edges:
                fh.write(f"{cid}\t{g.nodes[a]}\t{g.nodes[b]}\n")
    with open(d / "metagraph_edges.tsv", "w") as fh:
        fh.write("# subtype_a\tsubtype_b\n")
        for a, b in sorted(kg.metagraph.subtype_edges):
            fh.write(f"{a}\t{b}\n")
    with open(d / "hierarchy.tsv", "w") as fh:
        for s in kg.metagraph.subtypes:
            fh.write(f"{s}\t{kg.metagraph.hierarchy[s]}\n")


def read_bundle(directory):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"bundle directory not found: {d}")
    ppi_edges = [tuple(line.split("\t")[:2]) for _, line in _data_lines(d / "global_ppi.tsv")]
    proteins = [line.strip() for _, line in _data_lines(d / "proteins.tsv")]
    global_ppi = GlobalPPI.from_edges(ppi_edges, proteins=proteins)
    order = global_ppi.index

    nodes = {}
    for lineno, row in _read_table(d / "context_nodes.tsv", ("context", "protein")):
        if row["protein"] not in order:
            raise ParseError(f"unknown protein {row['protein']!r}",
                             path=d / "context_nodes.tsv", row=lineno)
        nodes.setdefault(row["context"], []).append(row["protein"])
    edges = {}
    for _, row in _read_table(d / "context_edges.tsv", ("context", "protein_a", "protein_b")):
        edges.setdefault(row["context"], []).append((row["protein_a"], row["protein_b"]))
    contexts = {}
    for cid, plist in nodes.items():
        plist = sorted(plist, key=order.__getitem__)
        local = {p: i for i, p in enumerate(plist)}
        pairs = sorted(_pair(local[a], local[b]) for a, b in edges.get(cid, []))
        contexts[cid] = ContextGraph(cid, tuple(plist), np.array(pairs, dtype=np.int64))

    hierarchy = read_hierarchy(d / "hierarchy.tsv")
    sub_edges = [tuple(line.split("\t")[:2]) for _, line in _data_lines(d / "metagraph_edges.tsv")]
    metagraph = assemble_metagraph(sub_edges, hierarchy)
    return KnowledgeGraph(global_ppi, contexts, metagraph)


def bundle_exists(directory):
    return os.path.isfile(os.path.join(directory, "context_nodes.tsv"))
