"""Area under the ROC curve."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMetricError


@dataclass(frozen=True)
class ScoredLabel:
    score: float
    label: int


def _unpack(items, labels=None):
    if labels is None:
        items = list(items)
        scores = np.array([float(it.score) if isinstance(it, ScoredLabel) else float(it[0]) for it in items])
        labels = np.array([int(it.label) if isinstance(it, ScoredLabel) else int(it[1]) for it in items])
    else:
        scores = np.asarray(items, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError(
            f"auROC needs both classes, got {n_pos} positive and {n_neg} negative")
    return scores, labels.astype(bool)


def average_ranks(x):
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], x.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auroc(items, labels=None):
    """Mann-Whitney auROC: ``P(s_pos > s_neg) + 0.5 P(s_pos == s_neg)``.

    Accepts either a sequence of :class:`ScoredLabel` / ``(score, label)``
    pairs, or separate ``scores`` and ``labels`` arrays.
    """
    scores, pos = _unpack(items, labels)
    n_pos = pos.sum()
    n_neg = pos.size - n_pos
    rank_sum = average_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pair_count_auroc(items, labels=None):
    """Quadratic reference: count wins and half-ties over all (positive, negative) pairs."""
    scores, pos = _unpack(items, labels)
    wins = 0.0
    pairs = 0
    for sp in scores[pos].tolist():
        for sn in scores[~pos].tolist():
            pairs += 1
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / pairs
