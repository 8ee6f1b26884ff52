"""Evaluation metrics: rank-based AUC and permutation-maximized set accuracy."""

from __future__ import annotations

import itertools

import numpy as np


def auc(pos_scores, neg_scores) -> float:
    """Probability a random positive outscores a random negative, ties at 0.5.

    Computed from the Mann-Whitney U statistic via midranks, equivalent to
    averaging over all (positive, negative) score pairs.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs nonempty positive and negative score lists")
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=np.float64)
    ranks[order] = np.arange(1, pooled.size + 1)
    # midranks for ties
    sorted_vals = pooled[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def i_acc(predicted_sets: list[tuple[int, ...]] | list[set], truth: tuple[int, ...] | set,
          channels: int) -> float:
    """Per-node channel-membership accuracy against a ground-truth set,
    maximized over channel relabelings of the truth.

    Because channel identities carry no fixed order, the score is the best
    achievable over all permutations of the channel indices applied to the
    ground-truth set (exact search, refused for more than 8 channels).
    """
    if channels > 8:
        raise ValueError(f"permutation search is exact only for <= 8 channels, got {channels}")
    truth = set(int(k) for k in truth)
    if not predicted_sets:
        raise ValueError("i_acc needs at least one predicted set")
    membership = np.zeros((len(predicted_sets), channels), dtype=bool)
    for v, pred in enumerate(predicted_sets):
        membership[v, list(pred)] = True
    freq = membership.mean(axis=0)  # fraction of nodes marking channel k invariant
    best = 0.0
    seen: set[frozenset] = set()
    for perm in itertools.permutations(range(channels)):
        image = frozenset(perm[k] for k in truth)
        if image in seen:
            continue
        seen.add(image)
        inside = sum(freq[k] for k in image)
        outside = sum(1.0 - freq[k] for k in range(channels) if k not in image)
        best = max(best, (inside + outside) / channels)
    return float(best)
