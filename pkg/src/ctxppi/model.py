"""Contextual graph attention model.

One forward pass runs, in order:

1. attention layers over every context's protein graph (weights shared by
   all contexts; contexts are stacked as a disjoint union so they never
   exchange messages here),
2. attention pooling of each context's proteins into its subtype node,
3. attention layers over the metagraph of subtypes and cell types,
4. conditioning of each protein on its own subtype's embedding,
5. a final protein attention layer without nonlinearity.

Protein and cell embeddings come out in the same ``latent_dim`` space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, NumericalError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 32
    n_protein_layers: int = 2
    n_attention_heads: int = 2
    n_metagraph_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_dim", "n_protein_layers", "n_attention_heads", "n_metagraph_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.latent_dim % self.n_attention_heads:
            raise ValueError("latent_dim must be divisible by n_attention_heads")

    @property
    def head_dim(self):
        return self.latent_dim // self.n_attention_heads


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """Named parameter matrices. Names are stable and sorted on export."""

    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def names(self):
        return list(self.arrays)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def equals(self, other):
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def xavier_limit(fan_in, fan_out):
    return np.sqrt(6.0 / (fan_in + fan_out))


def _xavier(rng, fan_in, fan_out):
    lim = xavier_limit(fan_in, fan_out)
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _attention_param_names(prefix, layer, head):
    base = f"{prefix}.{layer}.head{head}"
    return f"{base}.W", f"{base}.a_dst", f"{base}.a_src"


def init_params(config, kg):
    """Seeded initial parameters for ``kg``.

    Weight matrices and attention vectors are Xavier-uniform; the free input
    embeddings of proteins and cell nodes are drawn N(0, 1/latent_dim).
    """
    rng = np.random.default_rng(config.seed)
    d, dh = config.latent_dim, config.head_dim
    arrays = {}
    arrays["protein_features"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(kg.global_ppi.n_proteins, d))
    arrays["cell_features"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(len(kg.metagraph.nodes), d))
    for prefix, n_layers in (("protein", config.n_protein_layers), ("meta", config.n_metagraph_layers)):
        for layer in range(n_layers):
            for head in range(config.n_attention_heads):
                w, a_dst, a_src = _attention_param_names(prefix, layer, head)
                arrays[w] = _xavier(rng, d, dh)
                arrays[a_dst] = _xavier(rng, dh, 1)
                arrays[a_src] = _xavier(rng, dh, 1)
    arrays["bridge.W"] = _xavier(rng, d, d)
    arrays["bridge.score"] = _xavier(rng, d, 1)
    arrays["cond.W"] = _xavier(rng, 2 * d, d)
    return ModelParams(arrays)


def layer_params(params, prefix, layer, n_heads):
    """The per-head ``(W, a_dst, a_src)`` triples of one attention layer."""
    return [tuple(params[n] for n in _attention_param_names(prefix, layer, h)) for h in range(n_heads)]


# ---------------------------------------------------------------------------
# Graph batching
# ---------------------------------------------------------------------------


def directed_with_self_loops(edges, n_nodes, offset=0):
    """Both directions of every undirected edge plus one self-loop per node.
    Returns ``(src, dst)``; attention flows src -> dst."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2) + offset
    loops = np.arange(offset, offset + n_nodes, dtype=np.int64)
    src = np.concatenate([edges[:, 0], edges[:, 1], loops])
    dst = np.concatenate([edges[:, 1], edges[:, 0], loops])
    return src, dst


@dataclass
class GraphBatch:
    """All contexts stacked into one disjoint-union graph.

    Row ``r`` of the stacked protein matrix is protein ``row_protein[r]`` in
    context ``row_context[r]``; rows are ordered by context id, then by the
    context's node order.
    """

    contexts: list
    context_nodes: dict
    row_protein: np.ndarray
    row_context: np.ndarray
    offsets: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    subtype_of_context: np.ndarray
    cell_nodes: tuple
    meta_src: np.ndarray
    meta_dst: np.ndarray

    @property
    def n_rows(self):
        return len(self.row_protein)

    @property
    def n_contexts(self):
        return len(self.contexts)

    @property
    def n_cells(self):
        return len(self.cell_nodes)

    @cached_property
    def row_index(self):
        out = {}
        for ci, cid in enumerate(self.contexts):
            base = self.offsets[ci]
            for k, p in enumerate(self.context_nodes[cid]):
                out[(cid, p)] = int(base + k)
        return out


def make_batch(kg, message_edges=None):
    """Stack ``kg``'s contexts. ``message_edges`` optionally replaces each
    context's edge list (local indices) for message passing, e.g. with the
    training split only."""
    contexts = kg.context_ids
    if not contexts:
        raise ContractViolation("knowledge graph has no contexts")
    pindex = kg.global_ppi.index
    row_protein, row_context, offsets = [], [], [0]
    srcs, dsts = [], []
    for ci, cid in enumerate(contexts):
        g = kg.contexts[cid]
        if g.n_nodes == 0:
            raise ContractViolation(f"context {cid!r} is empty")
        edges = g.edges if message_edges is None else message_edges.get(cid, np.empty((0, 2)))
        s, t = directed_with_self_loops(edges, g.n_nodes, offset=offsets[-1])
        srcs.append(s)
        dsts.append(t)
        row_protein.extend(pindex[p] for p in g.nodes)
        row_context.extend([ci] * g.n_nodes)
        offsets.append(offsets[-1] + g.n_nodes)
    meta = kg.metagraph
    m_src, m_dst = directed_with_self_loops(meta.edge_array(), len(meta.nodes))
    return GraphBatch(
        contexts=contexts,
        context_nodes={cid: kg.contexts[cid].nodes for cid in contexts},
        row_protein=np.array(row_protein, dtype=np.int64),
        row_context=np.array(row_context, dtype=np.int64),
        offsets=np.array(offsets, dtype=np.int64),
        src=np.concatenate(srcs),
        dst=np.concatenate(dsts),
        subtype_of_context=np.array([meta.node_index[c] for c in contexts], dtype=np.int64),
        cell_nodes=meta.nodes,
        meta_src=m_src,
        meta_dst=m_dst,
    )


# ---------------------------------------------------------------------------
# Layers on a tape
# ---------------------------------------------------------------------------


def attention_layer(h, src, dst, n_nodes, heads, activate, attn_out=None):
    """Multi-head graph attention over directed edges ``src -> dst``.

    Per head: ``P = h W``; edge score ``leaky_relu(P[dst] a_dst + P[src] a_src)``
    normalized by softmax over each destination's incoming edges; output rows
    are the weighted sums of ``P[src]``. Heads are concatenated.
    """
    if np.setdiff1d(np.arange(n_nodes), dst[src == dst]).size:
        raise ContractViolation("attention layer: node without self-loop")
    outs = []
    for w, a_dst, a_src in heads:
        proj = ad.matmul(h, w)
        s_dst = ad.matmul(proj, a_dst)
        s_src = ad.matmul(proj, a_src)
        score = ad.leaky_relu(ad.add(ad.gather_rows(s_dst, dst), ad.gather_rows(s_src, src)))
        alpha = ad.segment_softmax(score, dst, n_nodes)
        if attn_out is not None:
            attn_out.append((alpha.value[:, 0].copy(), dst))
        msg = ad.mul(ad.gather_rows(proj, src), alpha)
        outs.append(ad.scatter_add_rows(msg, dst, n_nodes))
    out = outs[0] if len(outs) == 1 else ad.rowwise_concat(*outs)
    return ad.leaky_relu(out) if activate else out


def bridge_layer(h, row_context, n_contexts, w, score, attn_out=None):
    """Attention pooling of protein rows into one vector per context."""
    alpha = ad.segment_softmax(ad.matmul(h, score), row_context, n_contexts)
    if attn_out is not None:
        attn_out.append((alpha.value[:, 0].copy(), row_context))
    return ad.scatter_add_rows(ad.mul(ad.matmul(h, w), alpha), row_context, n_contexts)


def condition_layer(h, subtype_rows, w):
    """``leaky_relu([h_protein || h_subtype] W)`` row by row."""
    return ad.leaky_relu(ad.matmul(ad.rowwise_concat(h, subtype_rows), w))


@dataclass
class ForwardResult:
    proteins: ad.Var
    cells: ad.Var
    pre_bridge: ad.Var
    attention: dict


def _check_stage(var, stage):
    if not np.all(np.isfinite(var.value)):
        raise NumericalError(f"non-finite values after stage {stage!r}")


def forward_on_tape(tape, batch, pvars, config):
    """Record the full pipeline on ``tape``. ``pvars`` maps parameter name to
    a tape leaf."""
    nh = config.n_attention_heads
    attention = {"protein": [], "bridge": [], "meta": []}

    h = ad.gather_rows(pvars["protein_features"], batch.row_protein)
    for layer in range(config.n_protein_layers - 1):
        heads = layer_params(pvars, "protein", layer, nh)
        h = attention_layer(h, batch.src, batch.dst, batch.n_rows, heads, True, attention["protein"])
        _check_stage(h, f"protein layer {layer}")
    pre_bridge = h

    msg = bridge_layer(h, batch.row_context, batch.n_contexts,
                       pvars["bridge.W"], pvars["bridge.score"], attention["bridge"])
    _check_stage(msg, "bridge")

    cells = ad.add(pvars["cell_features"],
                   ad.scatter_add_rows(msg, batch.subtype_of_context, batch.n_cells))
    for layer in range(config.n_metagraph_layers):
        heads = layer_params(pvars, "meta", layer, nh)
        last = layer == config.n_metagraph_layers - 1
        cells = attention_layer(cells, batch.meta_src, batch.meta_dst, batch.n_cells, heads,
                                not last, attention["meta"])
        _check_stage(cells, f"metagraph layer {layer}")

    own_subtype = ad.gather_rows(cells, batch.subtype_of_context[batch.row_context])
    h = condition_layer(h, own_subtype, pvars["cond.W"])
    _check_stage(h, "conditioning")

    final = config.n_protein_layers - 1
    heads = layer_params(pvars, "protein", final, nh)
    z = attention_layer(h, batch.src, batch.dst, batch.n_rows, heads, False, attention["protein"])
    _check_stage(z, "final protein layer")
    return ForwardResult(z, cells, pre_bridge, attention)


def params_on_tape(tape, params, trainable=True):
    return {
        name: (tape.param(v, name) if trainable else tape.const(v))
        for name, v in params.arrays.items()
    }


# ---------------------------------------------------------------------------
# Standalone layer evaluation (numpy in, numpy out)
# ---------------------------------------------------------------------------


def context_attention_layer(h, edges, heads, activate=True):
    """Apply one attention layer to a single graph.

    ``edges`` are undirected local pairs; self-loops are added here. Returns
    ``(h_out, alphas)`` with one ``(weights, dst)`` pair per head.
    """
    tape = ad.Tape()
    hv = tape.const(h)
    hv_heads = [tuple(tape.const(m) for m in triple) for triple in heads]
    src, dst = directed_with_self_loops(edges, hv.shape[0])
    attn = []
    out = attention_layer(hv, src, dst, hv.shape[0], hv_heads, activate, attn)
    return out.value, attn


def bridge_pool(h, w, score):
    """Pool one context's protein embeddings into a single message vector.
    Returns ``(message, weights)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ContractViolation("bridge_pool needs a nonempty context")
    tape = ad.Tape()
    attn = []
    msg = bridge_layer(tape.const(h), np.zeros(h.shape[0], dtype=np.int64), 1,
                       tape.const(w), tape.const(score), attn)
    return msg.value[0], attn[0][0]


def metagraph_propagate(cells, metagraph, heads, activate=False):
    """One attention layer over the metagraph (self-loops added)."""
    return context_attention_layer(cells, metagraph.edge_array(), heads, activate)


def broadcast_cell_to_protein(h, subtype_embedding, w):
    h = np.asarray(h, dtype=np.float64)
    s = np.asarray(subtype_embedding, dtype=np.float64).reshape(1, -1)
    if w.shape != (h.shape[1] + s.shape[1], w.shape[1]):
        raise ShapeError(f"conditioning weight {w.shape} does not fit inputs {h.shape}, {s.shape}")
    tape = ad.Tape()
    rows = tape.const(np.repeat(s, h.shape[0], axis=0))
    return condition_layer(tape.const(h), rows, tape.const(w)).value


def edge_score(z_u, z_v):
    z_u = np.asarray(z_u, dtype=np.float64)
    z_v = np.asarray(z_v, dtype=np.float64)
    if z_u.shape != z_v.shape:
        raise ShapeError(f"edge_score: {z_u.shape} vs {z_v.shape}")
    return float(ad._sigmoid(np.array([[np.dot(z_u, z_v)]]))[0, 0])


# ---------------------------------------------------------------------------
# Embedding table
# ---------------------------------------------------------------------------


class EmbeddingTable:
    """Context-specific protein vectors and cell-node vectors, one latent
    dimension for all."""

    def __init__(self, context_nodes, protein_matrix, cell_nodes, cell_matrix):
        self.context_nodes = {cid: tuple(context_nodes[cid]) for cid in sorted(context_nodes)}
        self.protein_matrix = np.asarray(protein_matrix, dtype=np.float64)
        self.cell_nodes = tuple(cell_nodes)
        self.cell_matrix = np.asarray(cell_matrix, dtype=np.float64)
        n = sum(len(v) for v in self.context_nodes.values())
        if self.protein_matrix.shape[0] != n:
            raise ShapeError(f"{n} protein entries but {self.protein_matrix.shape[0]} rows")
        if self.cell_matrix.shape[0] != len(self.cell_nodes):
            raise ShapeError("cell matrix rows do not match cell nodes")
        if self.cell_nodes and self.cell_matrix.shape[1] != self.protein_matrix.shape[1]:
            raise ShapeError("protein and cell embeddings differ in dimension")
        self._rows = {}
        self._gene_contexts = {}
        r = 0
        for cid, nodes in self.context_nodes.items():
            for p in nodes:
                self._rows[(cid, p)] = r
                self._gene_contexts.setdefault(p, []).append(cid)
                r += 1
        self._cells = {c: i for i, c in enumerate(self.cell_nodes)}

    @property
    def dim(self):
        return self.protein_matrix.shape[1]

    @property
    def contexts(self):
        return list(self.context_nodes)

    @property
    def n_protein_entries(self):
        return self.protein_matrix.shape[0]

    @property
    def genes(self):
        return sorted(self._gene_contexts)

    def row(self, context_id, gene):
        return self._rows[(context_id, gene)]

    def has(self, context_id, gene):
        return (context_id, gene) in self._rows

    def protein(self, context_id, gene):
        return self.protein_matrix[self._rows[(context_id, gene)]]

    def contexts_of(self, gene):
        return list(self._gene_contexts.get(gene, []))

    def context_matrix(self, context_id):
        start = self._rows[(context_id, self.context_nodes[context_id][0])]
        return self.protein_matrix[start:start + len(self.context_nodes[context_id])]

    def cell(self, name):
        return self.cell_matrix[self._cells[name]]

    def all_finite(self):
        return bool(np.all(np.isfinite(self.protein_matrix)) and np.all(np.isfinite(self.cell_matrix)))

    def equals(self, other):
        return (
            self.context_nodes == other.context_nodes
            and self.cell_nodes == other.cell_nodes
            and np.array_equal(self.protein_matrix, other.protein_matrix)
            and np.array_equal(self.cell_matrix, other.cell_matrix)
        )

    def to_tsv(self, protein_path, cell_path):
        d = self.dim
        cols = [f"v{i}" for i in range(d)]
        with open(protein_path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["context", "protein", *cols])
            for (cid, p), r in self._rows.items():
                w.writerow([cid, p, *(_fmt(x) for x in self.protein_matrix[r])])
        with open(cell_path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["node", *cols])
            for c, i in self._cells.items():
                w.writerow([c, *(_fmt(x) for x in self.cell_matrix[i])])

    @classmethod
    def from_tsv(cls, protein_path, cell_path):
        context_nodes, prot_rows = {}, {}
        with open(protein_path, newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            next(reader)
            for row in reader:
                context_nodes.setdefault(row[0], []).append(row[1])
                prot_rows[(row[0], row[1])] = [float(x) for x in row[2:]]
        cells, cell_rows = [], []
        with open(cell_path, newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            next(reader)
            for row in reader:
                cells.append(row[0])
                cell_rows.append([float(x) for x in row[1:]])
        ordered = {cid: context_nodes[cid] for cid in sorted(context_nodes)}
        mat = [prot_rows[(cid, p)] for cid, nodes in ordered.items() for p in nodes]
        dim = len(mat[0]) if mat else 0
        return cls(ordered, np.array(mat).reshape(-1, dim), cells,
                   np.array(cell_rows).reshape(len(cells), dim))


def _fmt(x):
    return repr(float(x))


def forward(kg, params, config, batch=None):
    """Embed every (context, protein) pair and every metagraph node."""
    batch = batch if batch is not None else make_batch(kg)
    tape = ad.Tape()
    res = forward_on_tape(tape, batch, params_on_tape(tape, params, trainable=False), config)
    return EmbeddingTable(batch.context_nodes, res.proteins.value, batch.cell_nodes, res.cells.value)
