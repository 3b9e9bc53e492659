"""Context-free baseline: uniform random walks on the global network, a
positive PMI co-occurrence matrix, and a seeded randomized low-rank
factorization of it."""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .errors import ContractViolation
from .model import EmbeddingTable

WALKS_PER_NODE = 10
WALK_LENGTH = 20
WINDOW = 5


def _adjacency(global_ppi):
    n = global_ppi.n_proteins
    e = global_ppi.edge_array()
    rows = np.r_[e[:, 0], e[:, 1]]
    cols = np.r_[e[:, 1], e[:, 0]]
    adj = csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return adj


def random_walks(adj, walks_per_node, walk_length, rng):
    """``(n * walks_per_node, walk_length)`` node ids; nodes without
    neighbours stay put."""
    n = adj.shape[0]
    deg = np.diff(adj.indptr)
    cur = np.tile(np.arange(n), walks_per_node)
    walks = np.empty((cur.size, walk_length), dtype=np.int64)
    walks[:, 0] = cur
    for t in range(1, walk_length):
        d = deg[cur]
        step = (rng.random(cur.size) * np.maximum(d, 1)).astype(np.int64)
        nxt = adj.indices[np.minimum(adj.indptr[cur] + step, adj.indices.size - 1)] if adj.nnz else cur
        cur = np.where(d > 0, nxt, cur)
        walks[:, t] = cur
    return walks


def cooccurrence(walks, n, window):
    rows, cols = [], []
    for off in range(1, window + 1):
        a, b = walks[:, :-off].ravel(), walks[:, off:].ravel()
        rows += [a, b]
        cols += [b, a]
    r, c = np.concatenate(rows), np.concatenate(cols)
    return coo_matrix((np.ones(r.size), (r, c)), shape=(n, n)).toarray()


def ppmi(counts):
    total = counts.sum()
    row = counts.sum(axis=1, keepdims=True)
    col = counts.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    pmi[~np.isfinite(pmi)] = 0.0
    return np.maximum(pmi, 0.0)


def randomized_factor(m, dim, rng, n_iter=6, oversample=10):
    """Rank-``dim`` factor ``U sqrt(S)`` of a symmetric matrix by
    randomized subspace iteration. Column signs are fixed so each column's
    largest-magnitude entry is positive."""
    n = m.shape[0]
    k = min(n, dim + oversample)
    q, _ = np.linalg.qr(m @ rng.standard_normal((n, k)))
    for _ in range(n_iter):
        q, _ = np.linalg.qr(m @ (m.T @ q))
    u_small, s, _ = np.linalg.svd(q.T @ m, full_matrices=False)
    u = (q @ u_small)[:, :dim]
    s = s[:dim]
    signs = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs * np.sqrt(s)


def random_walk_embeddings(global_ppi, dim, seed, walks_per_node=WALKS_PER_NODE,
                           walk_length=WALK_LENGTH, window=WINDOW):
    """One context-free vector per protein, keyed by protein id.

    Walks never leave a connected component, so components are embedded
    independently of one another.
    """
    n = global_ppi.n_proteins
    if dim > n:
        raise ContractViolation(f"dim {dim} exceeds node count {n}")
    rng = np.random.default_rng(seed)
    walks = random_walks(_adjacency(global_ppi), walks_per_node, walk_length, rng)
    emb = randomized_factor(ppmi(cooccurrence(walks, n, window)), dim, rng)
    return {p: emb[i] for i, p in enumerate(global_ppi.proteins)}


def replicate_into_contexts(embeddings, like):
    """An :class:`EmbeddingTable` covering the same (context, protein) entries
    as ``like`` in which every protein carries its context-free vector."""
    rows = [embeddings[p] for c in like.contexts for p in like.context_nodes[c]]
    dim = len(next(iter(embeddings.values())))
    return EmbeddingTable(like.context_nodes, np.array(rows).reshape(-1, dim), (), np.empty((0, dim)))
