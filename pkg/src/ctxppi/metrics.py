"""Binary classification and ranking metrics.

AUROC is the Mann-Whitney statistic with tied scores counted as half a win.
Average precision is the step-interpolated area under the precision-recall
curve, taking one curve point per distinct score. Truncated ranking metrics
order items by descending score, ties broken by item id.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

RANKING_METRICS = ("ap5", "ap10", "auprc", "auroc", "p5", "p10", "r5", "r10")


def _arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    return s, y


def auroc(scores, labels):
    """``None`` when only one class is present."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels):
    """``None`` when there are no positives."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return float(np.sum(gains * precision))


def accuracy(scores, labels, threshold=0.5):
    s, y = _arrays(scores, labels)
    if s.size == 0:
        return None
    return float(np.mean((s >= threshold) == y))


def f1(scores, labels, threshold=0.5):
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


@dataclass(frozen=True)
class Metrics:
    auroc: float | None
    ap: float | None
    acc: float | None
    f1: float | None

    @classmethod
    def compute(cls, scores, labels, threshold=0.5):
        return cls(
            auroc(scores, labels),
            average_precision(scores, labels),
            accuracy(scores, labels, threshold),
            f1(scores, labels, threshold),
        )

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Truncated ranking metrics
# ---------------------------------------------------------------------------


def ranked_labels(scores, labels):
    """Labels reordered by descending score; ties go to the smaller id.

    ``scores`` and ``labels`` are mappings from item id.
    """
    items = sorted(scores, key=lambda g: (-scores[g], g))
    return [int(bool(labels[g])) for g in items]


def precision_at_k(ranked, k):
    top = ranked[: min(k, len(ranked))]
    return sum(top) / len(top) if top else 0.0


def recall_at_k(ranked, k):
    n_pos = sum(ranked)
    if n_pos == 0:
        return None
    return sum(ranked[:k]) / n_pos


def ap_at_k(ranked, k):
    """Mean of precision at each hit within the top k, normalized by
    ``min(k, number of positives)``."""
    n_pos = sum(ranked)
    if n_pos == 0:
        return None
    hits, acc = 0, 0.0
    for i, lab in enumerate(ranked[:k], start=1):
        if lab:
            hits += 1
            acc += hits / i
    return acc / min(k, n_pos)


def eval_ranking(scores, labels):
    """All Table-2 style metrics for one context, or ``None`` when the
    context has no positive item."""
    genes = sorted(scores)
    if not any(labels[g] for g in genes):
        return None
    ranked = ranked_labels(scores, labels)
    s = [scores[g] for g in genes]
    y = [int(bool(labels[g])) for g in genes]
    return {
        "ap5": ap_at_k(ranked, 5),
        "ap10": ap_at_k(ranked, 10),
        "auprc": average_precision(s, y),
        "auroc": auroc(s, y),
        "p5": precision_at_k(ranked, 5),
        "p10": precision_at_k(ranked, 10),
        "r5": recall_at_k(ranked, 5),
        "r10": recall_at_k(ranked, 10),
    }
