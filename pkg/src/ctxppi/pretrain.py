"""Self-supervised link-prediction pretraining.

Each context's protein edges are split 80/10/10 into train/valid/test.
Message passing only ever sees training edges. The loss asks the model to
score held-in edges above sampled non-edges (1:1) and, in the same way, to
recognise which subtypes each protein is activated in. Metagraph edges are
never split.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, NumericalError, SamplingExhausted
from .metrics import Metrics
from .model import EmbeddingTable, ModelParams, forward_on_tape, init_params, make_batch, params_on_tape

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.8, 0.1, 0.1)
MIN_SPLIT_EDGES = 10


def _context_rng(seed, context_id, stream):
    key = zlib.crc32(context_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, stream]))


def _keys(pairs, n):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    return lo * n + hi


# ---------------------------------------------------------------------------
# Splitting and negative sampling
# ---------------------------------------------------------------------------


def split_counts(n_edges, ratios=DEFAULT_RATIOS):
    """``(train, valid, test)`` sizes: floors for valid/test, remainder to train."""
    n_valid = int(math.floor(n_edges * ratios[1] + 1e-9))
    n_test = int(math.floor(n_edges * ratios[2] + 1e-9))
    return n_edges - n_valid - n_test, n_valid, n_test


@dataclass
class EdgeSplit:
    """Per-context positive and negative edges, as local index pairs."""

    train: dict
    valid: dict
    test: dict
    valid_neg: dict
    test_neg: dict
    seed: int
    warnings: list = field(default_factory=list)

    @property
    def contexts(self):
        return list(self.train)


def sample_negatives(graph, n_samples, rng, exclude_keys=None, max_rounds=50):
    """Draw ``n_samples`` distinct node pairs of ``graph`` that are not edges.

    Pairs come back as ``(i, j)`` with ``i < j``. ``exclude_keys`` holds extra
    pair keys (``i * n + j``) to avoid, e.g. negatives of another split.
    """
    n = graph.n_nodes
    n_pairs = n * (n - 1) // 2
    banned = _keys(graph.edges, n)
    if exclude_keys is not None and len(exclude_keys):
        banned = np.union1d(banned, np.asarray(exclude_keys, dtype=np.int64))
    else:
        banned = np.unique(banned)
    if n_samples == 0:
        return np.empty((0, 2), dtype=np.int64)
    if n_pairs - banned.size < n_samples:
        raise SamplingExhausted(
            f"context {graph.context_id!r}: {n_samples} negatives requested but only "
            f"{max(n_pairs - banned.size, 0)} non-edges exist"
        )
    chosen = np.empty(0, dtype=np.int64)
    for _ in range(max_rounds):
        need = n_samples - chosen.size
        draw = max(2 * need, 16)
        i = rng.integers(0, n, size=draw)
        j = rng.integers(0, n, size=draw)
        ok = i != j
        keys = _keys(np.stack([i[ok], j[ok]], axis=1), n)
        keys = keys[~np.isin(keys, banned)]
        keys = keys[~np.isin(keys, chosen)]
        _, first = np.unique(keys, return_index=True)
        keys = keys[np.sort(first)]
        chosen = np.concatenate([chosen, keys[:need]])
        if chosen.size == n_samples:
            return np.stack([chosen // n, chosen % n], axis=1)
    raise SamplingExhausted(
        f"context {graph.context_id!r}: could not draw {n_samples} negatives in {max_rounds} rounds"
    )


def split_edges(contexts, ratios=DEFAULT_RATIOS, seed=0):
    """Shuffle and split each context's edges; draw fixed 1:1 negatives for
    the validation and test sets."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ContractViolation(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    train, valid, test, valid_neg, test_neg, warnings = {}, {}, {}, {}, {}, []
    for cid in sorted(contexts):
        g = contexts[cid]
        rng = _context_rng(seed, cid, 0)
        edges = g.edges
        empty = np.empty((0, 2), dtype=np.int64)
        if len(edges) < MIN_SPLIT_EDGES:
            msg = f"context {cid!r} has {len(edges)} edges; all assigned to train"
            log.warning(msg)
            warnings.append(msg)
            train[cid], valid[cid], test[cid] = edges.copy(), empty, empty
            valid_neg[cid], test_neg[cid] = empty, empty
            continue
        perm = rng.permutation(len(edges))
        n_train, n_valid, _ = split_counts(len(edges), ratios)
        train[cid] = edges[perm[:n_train]]
        valid[cid] = edges[perm[n_train:n_train + n_valid]]
        test[cid] = edges[perm[n_train + n_valid:]]
        neg = sample_negatives(g, len(valid[cid]) + len(test[cid]), rng)
        valid_neg[cid] = neg[: len(valid[cid])]
        test_neg[cid] = neg[len(valid[cid]):]
    return EdgeSplit(train, valid, test, valid_neg, test_neg, seed, warnings)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _bce_logits_np(logits, labels):
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(y * np.logaddexp(0.0, -x) + (1 - y) * np.logaddexp(0.0, x)))


def pretrain_loss(table, ppi_batch=(), membership_batch=()):
    """Binary cross-entropy of a labelled batch under ``table``.

    ``ppi_batch`` items are ``(context, gene_a, gene_b, label)``;
    ``membership_batch`` items are ``(context, gene, subtype, label)`` where
    the gene is scored with its embedding from ``context``. Each part is
    averaged over its own items; with both present the two means are
    averaged with equal weight.
    """
    parts = []
    try:
        if ppi_batch:
            logits = [np.dot(table.protein(c, a), table.protein(c, b)) for c, a, b, _ in ppi_batch]
            parts.append(_bce_logits_np(logits, [lab for *_, lab in ppi_batch]))
        if membership_batch:
            logits = [np.dot(table.protein(c, g), table.cell(s)) for c, g, s, _ in membership_batch]
            parts.append(_bce_logits_np(logits, [lab for *_, lab in membership_batch]))
    except KeyError as exc:
        raise ContractViolation(f"no embedding for {exc.args[0]!r}") from None
    if not parts:
        raise ContractViolation("empty batch")
    return float(np.mean(parts))


def _bce_on_tape(pos_logits, neg_logits):
    terms = []
    if pos_logits is not None:
        terms.append(ad.total(ad.log_sigmoid(pos_logits)))
    if neg_logits is not None:
        terms.append(ad.total(ad.log_sigmoid(ad.scale(neg_logits, -1.0))))
    n = sum(t.shape[0] for t in (pos_logits, neg_logits) if t is not None)
    s = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.scale(s, -1.0 / n)


def _pair_logits(a, ia, b, ib):
    return ad.row_sum(ad.mul(ad.gather_rows(a, ia), ad.gather_rows(b, ib)))


@dataclass
class LossInputs:
    """Row indices into the stacked protein matrix (and cell matrix) for one
    evaluation of the training loss."""

    pos_u: np.ndarray
    pos_v: np.ndarray
    neg_u: np.ndarray
    neg_v: np.ndarray
    mem_rows: np.ndarray
    mem_cells: np.ndarray
    mem_neg_rows: np.ndarray
    mem_neg_cells: np.ndarray


def loss_on_tape(tape, batch, pvars, config, inputs):
    res = forward_on_tape(tape, batch, pvars, config)
    z, cells = res.proteins, res.cells
    ppi = _bce_on_tape(_pair_logits(z, inputs.pos_u, z, inputs.pos_v),
                       _pair_logits(z, inputs.neg_u, z, inputs.neg_v) if inputs.neg_u.size else None)
    parts = [ppi]
    if inputs.mem_rows.size:
        mem = _bce_on_tape(
            _pair_logits(z, inputs.mem_rows, cells, inputs.mem_cells),
            _pair_logits(z, inputs.mem_neg_rows, cells, inputs.mem_neg_cells)
            if inputs.mem_neg_rows.size else None,
        )
        parts.append(mem)
    loss = parts[0] if len(parts) == 1 else ad.scale(ad.add(parts[0], parts[1]), 0.5)
    return loss, res


class _MembershipSampler:
    """Draws, for each stacked row (protein p in context c), one subtype whose
    context does not activate p. Proteins active everywhere are skipped."""

    def __init__(self, kg, batch):
        n_ctx = batch.n_contexts
        active = np.zeros((kg.global_ppi.n_proteins, n_ctx), dtype=bool)
        active[batch.row_protein, batch.row_context] = True
        inactive = ~active[batch.row_protein]
        self.rows = np.flatnonzero(inactive.any(axis=1))
        self.options = [np.flatnonzero(inactive[r]) for r in self.rows]
        self.counts = np.array([len(o) for o in self.options], dtype=np.int64)
        self.flat = np.concatenate(self.options) if self.options else np.empty(0, dtype=np.int64)
        self.starts = np.r_[0, np.cumsum(self.counts)[:-1]] if self.options else np.empty(0, dtype=np.int64)
        self.subtype_of_context = batch.subtype_of_context

    def sample(self, rng):
        if self.rows.size == 0:
            return self.rows, self.rows
        pick = (rng.random(self.rows.size) * self.counts).astype(np.int64)
        ctx = self.flat[self.starts + pick]
        return self.rows, self.subtype_of_context[ctx]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-2
    ratios: tuple = DEFAULT_RATIOS
    negative_ratio: float = 1.0
    seed: int = 0


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    epoch: int
    params: ModelParams
    adam: ad.AdamState
    rng_state: dict
    best_valid: float
    best_epoch: int | None
    best_params: ModelParams | None
    losses: list
    valid_auroc: list


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    valid_auroc: list = field(default_factory=list)
    test_metrics: dict = field(default_factory=dict)
    best_epoch: int | None = None
    epochs_run: int = 0
    wall_clock: float = 0.0
    aborted: bool = False
    split: EdgeSplit | None = field(default=None, repr=False)
    final_state: "TrainState | None" = field(default=None, repr=False)

    def mean_test(self, name="auroc"):
        vals = [getattr(m, name) for m in self.test_metrics.values() if getattr(m, name) is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self, include_timing=False):
        d = {
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "aborted": self.aborted,
            "losses": self.losses,
            "valid_auroc": self.valid_auroc,
            "test_metrics": {c: m.as_dict() for c, m in self.test_metrics.items()},
            "mean_test_auroc": self.mean_test("auroc"),
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d

    def to_json(self, include_timing=False):
        return json.dumps(self.to_dict(include_timing), indent=2) + "\n"

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["context", "auroc", "ap", "acc", "f1"])
        for cid, m in self.test_metrics.items():
            w.writerow([cid, *("" if v is None else repr(v) for v in (m.auroc, m.ap, m.acc, m.f1))])
        return buf.getvalue()


def _rows(batch, cid, pairs):
    base = batch.offsets[batch.contexts.index(cid)]
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0] + base, pairs[:, 1] + base


def eval_link_prediction(table, positives, negatives):
    """Per-context metrics of held-out positives against negatives.

    Both arguments map context id to local index pairs; scores are
    ``sigmoid(z_u . z_v)`` with the context's own embeddings.
    """
    out = {}
    for cid in sorted(positives):
        pos = np.asarray(positives[cid], dtype=np.int64).reshape(-1, 2)
        neg = np.asarray(negatives.get(cid, ()), dtype=np.int64).reshape(-1, 2)
        if len(pos) + len(neg) == 0:
            continue
        z = table.context_matrix(cid)
        pairs = np.concatenate([pos, neg])
        logits = np.einsum("ij,ij->i", z[pairs[:, 0]], z[pairs[:, 1]])
        scores = ad._sigmoid(logits.reshape(-1, 1))[:, 0]
        labels = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
        out[cid] = Metrics.compute(scores, labels)
    return out


def _mean_auroc(metrics):
    vals = [m.auroc for m in metrics.values() if m.auroc is not None]
    return float(np.mean(vals)) if vals else float("nan")


def _table(batch, z, cells):
    return EmbeddingTable(batch.context_nodes, z, batch.cell_nodes, cells)


def train(kg, model_config, train_config, params=None, split=None, on_epoch=None, resume=None):
    """Full-batch Adam pretraining.

    Training negatives (edges and memberships) are redrawn every epoch;
    validation/test negatives stay fixed. The returned parameters are those
    of the epoch with the best mean validation AUROC. ``resume`` takes the
    ``final_state`` of an earlier report and continues from it; the result
    matches an uninterrupted run of the same total length.
    """
    t0 = time.perf_counter()
    if split is None:
        split = split_edges(kg.contexts, train_config.ratios, train_config.seed)
    if params is None:
        params = init_params(model_config, kg)
    report = TrainReport(split=split)
    if train_config.epochs <= 0 and resume is None:
        report.wall_clock = time.perf_counter() - t0
        return params, report

    batch = make_batch(kg, message_edges=split.train)
    rng = np.random.default_rng(np.random.SeedSequence([int(train_config.seed), 1]))
    mem_sampler = _MembershipSampler(kg, batch)
    mem_rows = np.arange(batch.n_rows, dtype=np.int64)
    mem_cells = batch.subtype_of_context[batch.row_context]

    pos = [_rows(batch, c, split.train[c]) for c in batch.contexts]
    pos_u = np.concatenate([p[0] for p in pos])
    pos_v = np.concatenate([p[1] for p in pos])
    train_graphs = {c: kg.contexts[c] for c in batch.contexts}
    held_out_neg = {
        c: _keys(np.concatenate([split.valid_neg[c], split.test_neg[c]]), kg.contexts[c].n_nodes)
        for c in batch.contexts
    }

    state = ad.AdamState(lr=train_config.lr)
    best = (-np.inf, None, None)
    current = params
    start = 0
    if resume is not None:
        current, state, start = resume.params, resume.adam.copy(), resume.epoch
        rng.bit_generator.state = resume.rng_state
        best = (resume.best_valid, resume.best_epoch, resume.best_params)
        report.losses = list(resume.losses)
        report.valid_auroc = list(resume.valid_auroc)
        report.epochs_run = start

    def validate(z, cells):
        table = _table(batch, z, cells)
        return _mean_auroc(eval_link_prediction(table, split.valid, split.valid_neg))

    for epoch in range(start, max(train_config.epochs, start) + 1):
        final_eval = epoch >= train_config.epochs
        tape = ad.Tape()
        pvars = params_on_tape(tape, current, trainable=not final_eval)
        if final_eval:
            res = forward_on_tape(tape, batch, pvars, model_config)
            val = validate(res.proteins.value, res.cells.value)
            report.valid_auroc.append(val)
            if val > best[0]:
                best = (val, epoch, current)
            break

        neg_u, neg_v = [], []
        for c in batch.contexts:
            k = int(round(len(split.train[c]) * train_config.negative_ratio))
            neg = sample_negatives(train_graphs[c], k, rng, exclude_keys=held_out_neg[c])
            u, v = _rows(batch, c, neg)
            neg_u.append(u)
            neg_v.append(v)
        mneg_rows, mneg_cells = mem_sampler.sample(rng)
        inputs = LossInputs(pos_u, pos_v, np.concatenate(neg_u), np.concatenate(neg_v),
                            mem_rows, mem_cells, mneg_rows, mneg_cells)
        try:
            loss, res = loss_on_tape(tape, batch, pvars, model_config, inputs)
        except NumericalError as exc:
            log.error("epoch %d: %s; stopping", epoch, exc)
            report.aborted = True
            break
        lval = float(loss.value[0, 0])
        if not np.isfinite(lval):
            log.error("epoch %d: loss is not finite; stopping", epoch)
            report.aborted = True
            break
        val = validate(res.proteins.value, res.cells.value)
        report.losses.append(lval)
        report.valid_auroc.append(val)
        if val > best[0]:
            best = (val, epoch, current)
        grads = ad.backward(tape, loss)
        new_arrays, state = ad.adam_step(current.arrays, grads, state)
        current = type(current)(new_arrays)
        report.epochs_run = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, lval, val)
        log.info("epoch %d loss %.5f valid auroc %.4f", epoch, lval, val)

    best_valid, best_epoch, best_params = best
    report.final_state = TrainState(
        report.epochs_run, current, state, rng.bit_generator.state, best_valid, best_epoch,
        best_params, list(report.losses), report.valid_auroc[: len(report.losses)],
    )
    if best_params is None:
        best_params = params
    report.best_epoch = best_epoch
    report.test_metrics = evaluate(kg, best_params, model_config, split, which="test")
    report.wall_clock = time.perf_counter() - t0
    return best_params, report


def embed(kg, params, model_config, split=None):
    """Embedding table with message passing restricted to training edges
    when ``split`` is given."""
    batch = make_batch(kg, message_edges=split.train if split is not None else None)
    tape = ad.Tape()
    res = forward_on_tape(tape, batch, params_on_tape(tape, params, trainable=False), model_config)
    return _table(batch, res.proteins.value, res.cells.value)


def evaluate(kg, params, model_config, split, which="test"):
    table = embed(kg, params, model_config, split)
    if which == "test":
        return eval_link_prediction(table, split.test, split.test_neg)
    return eval_link_prediction(table, split.valid, split.valid_neg)
