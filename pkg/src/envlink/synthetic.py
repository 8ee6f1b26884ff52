"""Synthetic distribution-shift generators.

Two protocols are provided:

* feature shift: keeps the graph structure and augments node features with a
  second block fitted to reconstruct the *next* snapshot's edges from a
  time-varying sample of positive/negative links, so the appended features
  carry tunable spurious correlation with future structure.
* environment synthetic: builds the graph itself from K per-channel Gaussian
  feature clouds; a configurable share of channels gets small per-snapshot
  noise (stable, "invariant") and the rest large noise.  Edges of the last
  channel are withheld from train/val snapshots and resurface only in test
  snapshots, at a configurable proportion, as the out-of-distribution set.

Both are bit-deterministic given their seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import DataError, DynamicGraph, sample_negative_edges
from .rng import Rng, derive
from .tensor import Tape, backward, parameter, reduce, take


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# --------------------------------------------------------------------------
# random base graph (stand-in for external datasets)


def gen_random_graph(num_nodes: int, num_snapshots: int, edges_per_snapshot: int,
                     num_attrs: int = 0, seed: int = 0, feature_dim: int = 32) -> DynamicGraph:
    """Seeded Erdos-Renyi-style base graph with optional edge attributes."""
    rng = Rng(derive(seed, "random-graph"))
    edge_lists, attr_lists = [], []
    for _ in range(num_snapshots):
        chosen: set[tuple[int, int]] = set()
        while len(chosen) < edges_per_snapshot:
            u = rng.integer(num_nodes)
            v = rng.integer(num_nodes)
            if u != v:
                chosen.add((min(u, v), max(u, v)))
        edges = sorted(chosen)
        edge_lists.append(edges)
        attr_lists.append([rng.integer(num_attrs) for _ in edges] if num_attrs else None)
    g = DynamicGraph.from_edges(
        num_nodes, edge_lists, attr_lists=attr_lists if num_attrs else None
    )
    g.features = Rng(derive(seed, "random-graph-features")).normal(
        (num_nodes, num_snapshots, feature_dim)
    )
    return g


# --------------------------------------------------------------------------
# node-feature shift protocol


def _fit_reconstruction_embedding(num_nodes: int, dim: int, pos: np.ndarray, neg: np.ndarray,
                                  iters: int, lr: float, rng: Rng) -> np.ndarray:
    """Gradient descent on logistic reconstruction of the sampled links."""
    emb = parameter(rng.normal((num_nodes, dim)) * 0.1)
    pairs = np.concatenate([pos, neg], axis=0)
    n_pos = len(pos)
    for _ in range(iters):
        with Tape() as tape:
            xu = take(emb, pairs[:, 0])
            xv = take(emb, pairs[:, 1])
            dots = reduce("sum", xu * xv, axis=1)
            # stable logistic terms: -log sigma(d) = softplus(-d), -log(1 - sigma(d)) = softplus(d)
            terms = []
            if n_pos:
                terms.append((-take(dots, np.arange(n_pos))).softplus().sum())
            if len(pairs) > n_pos:
                terms.append(take(dots, np.arange(n_pos, len(pairs))).softplus().sum())
            loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
            loss = loss * (1.0 / len(pairs))
        backward(loss, tape)
        emb.data -= lr * emb.grad
        emb.zero_grad()
    return emb.data


def sampling_probability(p_bar: float, sigma: float, t: int) -> float:
    """p(t) = clip(p_bar + sigma * cos(t), 0, 1)."""
    return float(np.clip(p_bar + sigma * np.cos(float(t)), 0.0, 1.0))


def gen_feature_shift(g: DynamicGraph, p_bar: float, sigma: float, seed: int,
                      iters: int = 200, lr: float = 0.05) -> DynamicGraph:
    """Append fitted shift features, returning a graph with 2d-dim features.

    For each snapshot t the next snapshot's edges are sampled with probability
    p(t) (plus matching negatives at 1 - p(t)), and an embedding block is
    fitted by logistic reconstruction of those samples.  Higher p(t) makes
    the appended block more predictive of future structure.  The final
    snapshot has no successor and receives a zero block.
    """
    if g.num_snapshots < 2:
        raise DataError("feature shift needs at least 2 snapshots")
    if g.features is None:
        raise DataError("feature shift needs base node features")
    n, t_len, dim = g.features.shape
    shifted = np.zeros((n, t_len, dim), dtype=np.float64)
    for t in range(t_len - 1):
        nxt = g.snapshots[t + 1]
        p = sampling_probability(p_bar, sigma, t)
        n_pos = _round_half_up(p * len(nxt))
        n_neg = _round_half_up((1.0 - p) * len(nxt))
        rng = Rng(derive(seed, "feature-shift", t))
        pos = nxt[rng.subset(len(nxt), min(n_pos, len(nxt)))] if len(nxt) else nxt
        neg = sample_negative_edges(g, t + 1, n_neg, derive(seed, "feature-shift-neg", t))
        if len(pos) + len(neg) == 0:
            continue
        shifted[:, t, :] = _fit_reconstruction_embedding(
            n, dim, pos, neg, iters, lr, Rng(derive(seed, "feature-shift-init", t))
        )
    return g.replace(features=np.concatenate([g.features, shifted], axis=2))


# --------------------------------------------------------------------------
# K-Gaussian environment protocol


@dataclass
class EnvSyntheticResult:
    graph: DynamicGraph                    # withheld-channel edges excluded everywhere
    ood_edges: dict[int, np.ndarray]       # test snapshot -> injected withheld-channel edges
    invariant_channels: tuple[int, ...]    # ground-truth low-noise channel indices
    channels: int


def _top_m_similarity_edges(feats: np.ndarray, m: int) -> np.ndarray:
    """Connect each node to its m nearest neighbors by cosine similarity."""
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    unit = feats / np.maximum(norms, 1e-12)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :m]
    edges: set[tuple[int, int]] = set()
    for u in range(feats.shape[0]):
        for v in order[u]:
            v = int(v)
            edges.add((min(u, v), max(u, v)))
    return np.asarray(sorted(edges), dtype=np.int64).reshape(-1, 2)


def gen_env_synthetic(num_nodes: int, num_snapshots: int, channels: int, sigma_e: float,
                      q_bar: float, seed: int, *, test_snapshots: int | None = None,
                      feature_dim: int = 8, neighbors: int = 3,
                      small_noise: float = 0.1, large_noise: float = 1.0) -> EnvSyntheticResult:
    """Generate the K-channel Gaussian world with a withheld channel.

    ``round(sigma_e * channels)`` leading channels are the ground-truth
    invariant set (small per-snapshot noise); the rest re-randomize each
    snapshot.  Per channel and snapshot, edges connect each node to its
    ``neighbors`` most similar peers in that channel's features.  The last
    channel's edges never appear in train/val snapshots; in the trailing
    ``test_snapshots`` snapshots a seeded fraction ``q_bar`` of them is
    returned as the out-of-distribution edge set.
    """
    if num_nodes < 4:
        raise DataError("environment synthetic generator needs at least 4 nodes")
    if channels < 2:
        raise DataError("environment synthetic generator needs at least 2 channels")
    if not (0.0 <= sigma_e <= 1.0 and 0.0 <= q_bar <= 1.0):
        raise DataError("sigma_e and q_bar must lie in [0, 1]")
    if test_snapshots is None:
        test_snapshots = max(1, num_snapshots // 5)
    n_invariant = _round_half_up(sigma_e * channels)
    invariant = tuple(range(n_invariant))

    rng = Rng(derive(seed, "env-synthetic"))
    means = [rng.normal(feature_dim) for _ in range(channels)]
    bases = [means[k] + rng.normal((num_nodes, feature_dim)) for k in range(channels)]

    features = np.zeros((num_nodes, num_snapshots, channels * feature_dim))
    per_channel_edges: list[list[np.ndarray]] = [[] for _ in range(channels)]
    for t in range(num_snapshots):
        for k in range(channels):
            std = small_noise if k in invariant else large_noise
            noisy = bases[k] + std * rng.normal((num_nodes, feature_dim))
            features[:, t, k * feature_dim:(k + 1) * feature_dim] = noisy
            per_channel_edges[k].append(_top_m_similarity_edges(noisy, neighbors))

    test_start = num_snapshots - test_snapshots
    snapshots: list[np.ndarray] = []
    ood_edges: dict[int, np.ndarray] = {}
    inject_rng = Rng(derive(seed, "env-synthetic-inject"))
    for t in range(num_snapshots):
        visible = np.concatenate([per_channel_edges[k][t] for k in range(channels - 1)], axis=0)
        snapshots.append(visible)
        if t >= test_start:
            held = per_channel_edges[channels - 1][t]
            count = _round_half_up(q_bar * len(held))
            idx = inject_rng.subset(len(held), count)
            chosen = held[np.sort(idx)]
            # drop injected edges that coincide with an in-distribution edge
            vis = {(int(u), int(v)) for u, v in visible}
            chosen = np.asarray(
                [e for e in chosen.tolist() if (e[0], e[1]) not in vis], dtype=np.int64
            ).reshape(-1, 2)
            ood_edges[t] = chosen
    graph = DynamicGraph.from_edges(num_nodes, snapshots, features=features)
    return EnvSyntheticResult(
        graph=graph, ood_edges=ood_edges, invariant_channels=invariant, channels=channels
    )
