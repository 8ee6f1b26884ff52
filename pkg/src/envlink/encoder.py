"""Multi-channel environment-aware encoder for snapshot graphs.

Each of K channels owns a linear projection; a snapshot's node features (plus
a sinusoidal encoding of the snapshot index, added only at the first layer)
are projected and squashed per channel, edges are reweighted by a softmax over
*channels* of the per-edge embedding dot products, and neighbor messages are
aggregated residually.  Stacking L such layers gives per-snapshot embeddings;
a causal prefix mean over snapshots then yields the final representation, one
(K, d') block per node and time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import DynamicGraph
from .rng import Rng, derive
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    matmul,
    reduce,
    reshape,
    scatter_rows,
    softmax_axis,
    take,
)


def time_encoding(t: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding of a snapshot index.

    Entry 2i is sin(t / 10000^(2i/dim)) and entry 2i+1 the matching cosine;
    requires an even dimension.
    """
    if dim % 2:
        raise ShapeError(f"time encoding needs an even dimension, got {dim}")
    i = np.arange(dim // 2, dtype=np.float64)
    angles = float(t) / np.power(10000.0, 2.0 * i / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


class EnvConvLayer:
    """K independent channel projections with shared attention/aggregation."""

    def __init__(self, in_dim: int, out_dim: int, channels: int, rng: Rng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.channels = channels
        scale = 1.0 / np.sqrt(in_dim)
        self.weights = []
        self.biases = []
        for k in range(channels):
            w = rng.spawn("weight", k).uniform((in_dim, out_dim)) * 2 * scale - scale
            b = rng.spawn("bias", k).uniform((1, out_dim)) * 2 * scale - scale
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return list(self.weights) + list(self.biases)

    def project(self, inputs: list[Tensor]) -> Tensor:
        """Per-channel sigmoid(input_k @ W_k + b_k), stacked to (N, K, out)."""
        n = inputs[0].shape[0]
        cols = []
        for k in range(self.channels):
            h = (matmul(inputs[k], self.weights[k]) + self.biases[k]).sigmoid()
            cols.append(reshape(h, (n, 1, self.out_dim)))
        return concat(cols, axis=1)


def _aggregate(z: Tensor, edges: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Residual neighbor aggregation with channel-normalized edge weights.

    For every directed edge (u -> v) the weight of channel k is
    exp(z_u[k] . z_v[k]) normalized across the K channels of that edge, and
    v accumulates the weighted z_u[k] messages on top of its own embedding.
    Returns the updated embeddings and the (2E, K) weight array for audit.
    """
    n, k, _ = z.shape
    if len(edges) == 0:
        return z, np.zeros((0, k))
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    zu = take(z, src)
    zv = take(z, dst)
    dots = reduce("sum", zu * zv, axis=2)
    attn = softmax_axis(dots, axis=1)
    messages = zu * reshape(attn, (len(src), k, 1))
    gathered = scatter_rows(messages, dst, n)
    return z + gathered, attn.data


@dataclass
class EnvRepresentation:
    """Per-node, per-time, per-channel embeddings.

    ``z`` is the causal prefix-mean representation (what predictors and the
    sample library consume); ``pre_pool`` holds the raw per-snapshot values
    feeding that mean.  Both are (N, T, K, d').  ``attention`` maps
    (snapshot, layer) to the audit copy of edge channel weights when
    collection was requested.
    """

    z: Tensor
    pre_pool: Tensor
    attention: dict[tuple[int, int], np.ndarray] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.z.shape

    def at_time(self, t: int) -> Tensor:
        n, _, k, d = self.z.shape
        return reshape(take(self.z, [t], axis=1), (n, k, d))


def temporal_mean(pre_pool: Tensor) -> Tensor:
    """Causal prefix mean along the time axis of an (N, T, K, d') tensor."""
    n, t_len, k, d = pre_pool.shape
    acc = None
    outs = []
    for t in range(t_len):
        step = take(pre_pool, [t], axis=1)
        acc = step if acc is None else acc + step
        outs.append(acc * (1.0 / (t + 1)))
    return concat(outs, axis=1)


class EnvEncoder:
    """Stack of L channel-aware layers plus the temporal prefix mean."""

    def __init__(self, feature_dim: int, channels: int = 5, hidden_dim: int = 16,
                 layers: int = 2, seed: int = 0):
        if layers < 1:
            raise ValueError("encoder needs at least one layer")
        self.feature_dim = feature_dim
        self.channels = channels
        self.hidden_dim = hidden_dim
        rng = Rng(derive(seed, "encoder-init"))
        dims = [feature_dim] + [hidden_dim] * layers
        self.layers = [
            EnvConvLayer(dims[i], dims[i + 1], channels, rng.spawn("layer", i))
            for i in range(layers)
        ]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def _spatial(self, x_t: np.ndarray, edges: np.ndarray, t: int,
                 collect: dict | None) -> Tensor:
        n = x_t.shape[0]
        base = Tensor(x_t + time_encoding(t, self.feature_dim))
        h: Tensor | None = None
        for li, layer in enumerate(self.layers):
            if li == 0:
                inputs = [base] * self.channels
            else:
                inputs = [
                    reshape(take(h, [k], axis=1), (n, layer.in_dim))
                    for k in range(self.channels)
                ]
            z = layer.project(inputs)
            h, attn = _aggregate(z, edges)
            if collect is not None:
                collect[(t, li)] = attn
        return h

    def encode(self, g: DynamicGraph, upto: int | None = None,
               collect_attention: bool = False) -> EnvRepresentation:
        """Run spatial layers per snapshot, then the causal temporal mean.

        ``upto`` limits encoding to the first ``upto`` snapshots (training
        never needs test-time structure).
        """
        if g.features is None:
            raise ValueError("encoder needs node features; supply or generate them first")
        n, t_total, d = g.features.shape
        if d != self.feature_dim:
            raise ShapeError(f"encoder built for feature dim {self.feature_dim}, data has {d}")
        t_len = t_total if upto is None else min(upto, t_total)
        collect: dict | None = {} if collect_attention else None
        steps = []
        for t in range(t_len):
            zhat = self._spatial(g.features[:, t, :], g.snapshots[t], t, collect)
            steps.append(reshape(zhat, (n, 1, self.channels, self.hidden_dim)))
        pre_pool = concat(steps, axis=1)
        return EnvRepresentation(z=temporal_mean(pre_pool), pre_pool=pre_pool, attention=collect)
