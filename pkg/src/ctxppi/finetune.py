"""Risk-gene classification on frozen context-specific protein embeddings.

One MLP is shared by all contexts. Every (context, labelled gene) pair is an
example; at inference each context-specific embedding of a gene is scored on
its own, so a gene gets one score per context it is active in.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, EmptyDataset, GeneNotFound, ParseError
from .kg import _data_lines
from .metrics import RANKING_METRICS, eval_ranking

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RiskLabelSet:
    positives: frozenset
    negatives: frozenset

    def __post_init__(self):
        object.__setattr__(self, "positives", frozenset(self.positives))
        object.__setattr__(self, "negatives", frozenset(self.negatives))
        if self.positives & self.negatives:
            raise ContractViolation(
                f"genes labelled both ways: {sorted(self.positives & self.negatives)[:5]}"
            )
        if not self.positives or not self.negatives:
            raise ContractViolation("need at least one positive and one negative gene")

    @classmethod
    def from_mapping(cls, labels):
        return cls({g for g, v in labels.items() if v}, {g for g, v in labels.items() if not v})

    def as_mapping(self):
        out = {g: 1 for g in self.positives}
        out.update({g: 0 for g in self.negatives})
        return dict(sorted(out.items()))

    def __len__(self):
        return len(self.positives) + len(self.negatives)


def read_labels(path):
    labels = {}
    for lineno, line in _data_lines(path):
        cells = [c.strip() for c in line.split("\t")]
        if cells[:2] == ["gene", "label"]:
            continue
        if len(cells) < 2 or cells[1] not in ("0", "1"):
            raise ParseError("expected gene<TAB>label with label 0 or 1", path=path, row=lineno)
        if cells[0] in labels and labels[cells[0]] != int(cells[1]):
            raise ParseError(f"gene {cells[0]!r} labelled twice", path=path, row=lineno)
        labels[cells[0]] = int(cells[1])
    return RiskLabelSet.from_mapping(labels)


@dataclass
class FinetuneDataset:
    contexts: list
    genes: list
    labels: np.ndarray
    features: np.ndarray
    n_missing: int = 0

    def __len__(self):
        return len(self.genes)

    def per_context(self):
        out = {}
        for i, c in enumerate(self.contexts):
            out.setdefault(c, []).append(i)
        return out

    def subset(self, genes):
        keep = np.array([g in genes for g in self.genes], dtype=bool)
        idx = np.flatnonzero(keep)
        return FinetuneDataset(
            [self.contexts[i] for i in idx], [self.genes[i] for i in idx],
            self.labels[idx], self.features[idx],
        )


def build_finetune_dataset(table, labels):
    label_map = labels.as_mapping()
    missing = [g for g in label_map if not table.contexts_of(g)]
    if missing:
        log.warning("%d labelled genes have no embedding in any context", len(missing))
    contexts, genes, ys, rows = [], [], [], []
    for cid in table.contexts:
        for g in table.context_nodes[cid]:
            if g in label_map:
                contexts.append(cid)
                genes.append(g)
                ys.append(label_map[g])
                rows.append(table.row(cid, g))
    if not rows:
        raise EmptyDataset("no labelled gene has an embedding")
    return FinetuneDataset(contexts, genes, np.array(ys, dtype=np.float64),
                           table.protein_matrix[rows].copy(), len(missing))


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 32
    lr: float = 0.01
    epochs: int = 200
    test_fraction: float = 0.2


@dataclass
class MlpParams:
    arrays: dict

    def __getitem__(self, name):
        return self.arrays[name]

    def equals(self, other):
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


@dataclass
class GeneSplit:
    train_genes: frozenset
    test_genes: frozenset


@dataclass
class FinetuneResult:
    params: MlpParams
    split: GeneSplit
    losses: list = field(default_factory=list)
    train_accuracy: float | None = None


def init_mlp(dim, hidden, rng):
    def xavier(fi, fo):
        lim = np.sqrt(6.0 / (fi + fo))
        return rng.uniform(-lim, lim, size=(fi, fo))

    return MlpParams({
        "W1": xavier(dim, hidden),
        "b1": np.zeros((1, hidden)),
        "W2": xavier(hidden, 1),
        "b2": np.zeros((1, 1)),
    })


def _logits_on_tape(x, p):
    h = ad.leaky_relu(ad.add(ad.matmul(x, p["W1"]), p["b1"]))
    return ad.add(ad.matmul(h, p["W2"]), p["b2"])


def mlp_scores(features, params):
    tape = ad.Tape()
    p = {k: tape.const(v) for k, v in params.arrays.items()}
    return ad._sigmoid(_logits_on_tape(tape.const(features), p).value)[:, 0]


def split_genes(dataset, test_fraction, rng):
    """Stratified gene-level split; a gene's examples all land on one side."""
    label_of = {}
    for g, y in zip(dataset.genes, dataset.labels):
        label_of[g] = int(y)
    test = set()
    for cls in (1, 0):
        genes = sorted(g for g, y in label_of.items() if y == cls)
        genes = [genes[i] for i in rng.permutation(len(genes))]
        n_test = int(round(test_fraction * len(genes)))
        if len(genes) >= 2:
            n_test = min(max(n_test, 1), len(genes) - 1)
        else:
            n_test = 0
        test.update(genes[:n_test])
    return GeneSplit(frozenset(label_of) - test, frozenset(test))


def train_mlp(dataset, config=MlpConfig(), seed=0):
    """Adam on binary cross-entropy over the training genes' examples."""
    if len(np.unique(dataset.labels)) < 2:
        raise ContractViolation("fine-tuning needs both classes")
    rng = np.random.default_rng(seed)
    split = split_genes(dataset, config.test_fraction, rng)
    train = dataset.subset(split.train_genes)
    if len(np.unique(train.labels)) < 2:
        raise ContractViolation("training split lacks one class")
    params = init_mlp(dataset.features.shape[1], config.hidden, rng)
    state = ad.AdamState(lr=config.lr)
    pos = train.labels == 1
    losses = []
    for _ in range(config.epochs):
        tape = ad.Tape()
        p = {k: tape.param(v, k) for k, v in params.arrays.items()}
        logits = _logits_on_tape(tape.const(train.features), p)
        terms = []
        if pos.any():
            terms.append(ad.total(ad.log_sigmoid(ad.gather_rows(logits, np.flatnonzero(pos)))))
        if (~pos).any():
            terms.append(ad.total(ad.log_sigmoid(ad.scale(ad.gather_rows(logits, np.flatnonzero(~pos)), -1.0))))
        loss = ad.scale(ad.add(*terms) if len(terms) == 2 else terms[0], -1.0 / len(train))
        losses.append(float(loss.value[0, 0]))
        grads = ad.backward(tape, loss)
        arrays, state = ad.adam_step(params.arrays, grads, state)
        params = MlpParams(arrays)
    acc = float(np.mean((mlp_scores(train.features, params) >= 0.5) == (train.labels == 1)))
    return FinetuneResult(params, split, losses, acc)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextScore:
    gene: str
    context_id: str
    score: float


def score_gene(gene, table, params):
    contexts = table.contexts_of(gene)
    if not contexts:
        raise GeneNotFound(gene)
    feats = np.stack([table.protein(c, gene) for c in contexts])
    return [ContextScore(gene, c, float(s)) for c, s in zip(contexts, mlp_scores(feats, params))]


def rank_contexts(gene, table, params):
    """Contexts of ``gene`` by descending score; ties by context id."""
    return sorted(score_gene(gene, table, params), key=lambda s: (-s.score, s.context_id))


def score_all(table, params, genes):
    out = []
    for g in sorted(genes):
        if table.contexts_of(g):
            out.extend(score_gene(g, table, params))
    return out


def evaluate_contexts(table, params, labels, genes):
    """Ranking metrics per context over ``genes`` (typically the held-out
    ones). Contexts with no positive among them map to ``None``."""
    label_map = labels.as_mapping()
    by_context = {}
    for s in score_all(table, params, genes):
        by_context.setdefault(s.context_id, {})[s.gene] = s.score
    return {
        cid: eval_ranking(scores, {g: label_map[g] for g in scores})
        for cid, scores in sorted(by_context.items())
    }


def scores_csv(scores):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gene", "context", "score"])
    for s in scores:
        w.writerow([s.gene, s.context_id, repr(s.score)])
    return buf.getvalue()


def rankings_json(table, params, genes):
    out = {}
    for g in sorted(genes):
        if table.contexts_of(g):
            out[g] = [{"context": s.context_id, "score": s.score}
                      for s in rank_contexts(g, table, params)]
    return json.dumps(out, indent=2) + "\n"


def context_metrics_csv(per_context):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["context", *RANKING_METRICS])
    for cid, m in per_context.items():
        if m is None:
            w.writerow([cid, *[""] * len(RANKING_METRICS)])
        else:
            w.writerow([cid, *("" if m[k] is None else repr(m[k]) for k in RANKING_METRICS)])
    return buf.getvalue()
