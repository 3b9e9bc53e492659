"""Embedding analytics: cosine similarity heatmaps, within- versus
across-context contrast of protein embeddings, and head-to-head model
comparison per context."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage
from scipy.spatial.distance import squareform

from .errors import ContractViolation, DegenerateVector, InsufficientContexts
from .metrics import RANKING_METRICS

METRIC_NAMES = {
    "ap5": "AP@5",
    "ap10": "AP@10",
    "auprc": "AUPRC",
    "auroc": "AUROC",
    "p5": "Precision@5",
    "p10": "Precision@10",
    "r5": "Recall@5",
    "r10": "Recall@10",
}


def cosine(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractViolation(f"cosine: shapes {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateVector("cosine of a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateVector("zero-norm embedding row")
    return x / norms


def cosine_matrix(x):
    u = _unit_rows(np.asarray(x, dtype=np.float64))
    s = u @ u.T
    s = np.clip((s + s.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return s


def cluster_order(sim):
    """Leaf order of average-linkage clustering on ``1 - sim``."""
    n = sim.shape[0]
    if n <= 2:
        return np.arange(n)
    dist = np.clip(1.0 - sim, 0.0, None)
    np.fill_diagonal(dist, 0.0)
    return leaves_list(linkage(squareform(dist, checks=False), method="average"))


@dataclass(frozen=True)
class SimilarityMatrix:
    labels: tuple
    values: np.ndarray

    @classmethod
    def from_vectors(cls, labels, vectors, ordered=True):
        sim = cosine_matrix(vectors)
        order = cluster_order(sim) if ordered else np.arange(len(labels))
        return cls(tuple(labels[i] for i in order), sim[np.ix_(order, order)])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["", *self.labels])
        for lab, row in zip(self.labels, self.values):
            w.writerow([lab, *(repr(float(x)) for x in row)])
        return buf.getvalue()

    def to_svg(self, title="", cell=14):
        n = len(self.labels)
        margin = 8 + 7 * max((len(str(x)) for x in self.labels), default=1)
        size = margin + n * cell + 10
        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}" '
            f'font-family="sans-serif" font-size="10">'
        ]
        if title:
            out.append(f'<text x="4" y="14">{_esc(title)}</text>')
        y0 = margin + 20
        for i, lab in enumerate(self.labels):
            y = y0 + i * cell + cell * 0.75
            out.append(f'<text x="{margin - 4}" y="{y:.1f}" text-anchor="end">{_esc(lab)}</text>')
            x = margin + i * cell + cell * 0.75
            out.append(
                f'<text x="{x:.1f}" y="{y0 - 4}" transform="rotate(-90 {x:.1f} {y0 - 4})">{_esc(lab)}</text>'
            )
        for i in range(n):
            for j in range(n):
                out.append(
                    f'<rect x="{margin + j * cell}" y="{y0 + i * cell}" width="{cell}" height="{cell}" '
                    f'fill="{_diverging(self.values[i, j])}"><title>{_esc(self.labels[i])} / '
                    f'{_esc(self.labels[j])}: {self.values[i, j]:.4f}</title></rect>'
                )
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _diverging(v):
    v = float(np.clip(v, -1.0, 1.0))
    if v >= 0:
        r, g, b = 255, int(round(255 * (1 - v))), int(round(255 * (1 - v)))
    else:
        r, g, b = int(round(255 * (1 + v))), int(round(255 * (1 + v))), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def protein_context_similarity(gene, table):
    contexts = table.contexts_of(gene)
    if len(contexts) < 2:
        raise InsufficientContexts(f"{gene!r} is active in {len(contexts)} context(s); need 2")
    vecs = np.stack([table.protein(c, gene) for c in contexts])
    return SimilarityMatrix.from_vectors(contexts, vecs)


def cell_similarity(table):
    if len(table.cell_nodes) < 2:
        raise InsufficientContexts("need at least 2 cell nodes")
    return SimilarityMatrix.from_vectors(list(table.cell_nodes), table.cell_matrix)


def marker_contrast(table):
    """Per context, genes ranked by how much more their embedding resembles
    the context's centroid than their own embeddings elsewhere.

    ``contrast(g, c) = cos(z_g^c, centroid_c) - mean_{c' != c} cos(z_g^c, z_g^c')``.
    Genes active in a single context are skipped.
    """
    centroids = {c: table.context_matrix(c).mean(axis=0) for c in table.contexts}
    scores = {c: [] for c in table.contexts}
    for gene in table.genes:
        ctxs = table.contexts_of(gene)
        if len(ctxs) < 2:
            continue
        u = _unit_rows(np.stack([table.protein(c, gene) for c in ctxs]))
        gram = u @ u.T
        k = len(ctxs)
        across = (gram.sum(axis=1) - np.diag(gram)) / (k - 1)
        for i, c in enumerate(ctxs):
            within = cosine(u[i], centroids[c])
            scores[c].append((gene, within - float(across[i])))
    return {c: sorted(v, key=lambda t: (-t[1], t[0])) for c, v in scores.items()}


def marker_contrast_csv(contrast):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["context", "rank", "gene", "contrast"])
    for c, rows in contrast.items():
        for r, (g, v) in enumerate(rows, start=1):
            w.writerow([c, r, g, repr(v)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Model comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonReport:
    """Per metric: ``(wins, total, percentage)``; strict wins only."""

    rows: dict

    def percentage(self, metric):
        return self.rows[metric][2]

    def to_csv(self, model="model", baseline="baseline"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", f"{model}_vs_{baseline}_pct", "wins", "total"])
        for key, (wins, total, pct) in self.rows.items():
            w.writerow([METRIC_NAMES[key], "" if pct is None else f"{pct:.2f}", wins, total])
        return buf.getvalue()

    def to_json(self):
        return json.dumps(
            {METRIC_NAMES[k]: {"wins": w, "total": t, "percentage": p}
             for k, (w, t, p) in self.rows.items()},
            indent=2,
        ) + "\n"


def compare_models(metrics_model, metrics_baseline):
    """Share of contexts in which the model strictly beats the baseline.

    Both arguments map context id to a metric dict (as produced by
    :func:`ctxppi.metrics.eval_ranking`) or ``None``. A context counts for a
    metric only when both sides define it.
    """
    if set(metrics_model) != set(metrics_baseline):
        diff = sorted(set(metrics_model) ^ set(metrics_baseline))
        raise ContractViolation(f"context lists differ: {diff[:5]}")
    rows = {}
    for key in RANKING_METRICS:
        wins = total = 0
        for cid in sorted(metrics_model):
            a, b = metrics_model[cid], metrics_baseline[cid]
            if (a is None) != (b is None):
                raise ContractViolation(f"context {cid!r} evaluated on only one side")
            if a is None or a.get(key) is None or b.get(key) is None:
                continue
            total += 1
            wins += int(a[key] > b[key])
        rows[key] = (wins, total, round(100.0 * wins / total, 2) if total else None)
    return ComparisonReport(rows)
