"""Invariant pattern recognition over environment channels.

For each node the spread of its per-channel representations across time is
summarized as a length-K variance profile.  A quantized subset-sum dynamic
program finds the most balanced two-way split of that profile; the residual
imbalance is the node's invariance threshold, which then drives the
invariant/variant channel partition.

The DP indexes states by integer sums, so real-valued variances are scaled by
``q_scale`` and rounded half-up before the program runs.  The threshold it
yields is therefore exact in the quantized domain and within ``K/(2*q_scale)``
of the unquantized optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_Q_SCALE = 1000

# tolerance for float roundoff when comparing variances against the cutoff
_CUTOFF_EPS = 1e-12


def channel_variance(z, v: int) -> np.ndarray:
    """Variance profile of node v: per-dimension population variance of each
    channel's representation across time, averaged over dimensions."""
    arr = z.z.data if hasattr(z, "z") else np.asarray(z)
    series = arr[v]  # (T, K, d')
    return series.var(axis=0).mean(axis=1)


def channel_variance_all(z) -> np.ndarray:
    """(N, K) variance profiles for every node at once."""
    arr = z.z.data if hasattr(z, "z") else np.asarray(z)
    return arr.var(axis=1).mean(axis=2)


def quantize_profile(profile: np.ndarray, q_scale: int) -> np.ndarray:
    if int(q_scale) < 1:
        raise ValueError(f"quantization scale must be >= 1, got {q_scale}")
    return np.floor(np.asarray(profile, dtype=np.float64) * q_scale + 0.5).astype(np.int64)


def _prefix_sum_bitsets(q: np.ndarray) -> list[int]:
    """bits[i] has bit s set iff some subset of the first i items sums to s."""
    bits = [1]
    acc = 1
    for qi in q:
        acc |= acc << int(qi)
        bits.append(acc)
    return bits


def dp_delta(profile: np.ndarray, q_scale: int = DEFAULT_Q_SCALE) -> tuple[float, tuple[int, ...]]:
    """Minimum split imbalance via the boolean feasibility DP.

    Quantizes the profile, finds the largest feasible subset sum j at or below
    half the total, and returns ``delta = (total - 2j) / q_scale`` together
    with one subset achieving sum j (backtracked preferring later channels;
    zero-weight channels stay in the complement).
    """
    q = quantize_profile(profile, q_scale)
    total = int(q.sum())
    half = total // 2
    bits = _prefix_sum_bitsets(q)
    feasible_below = bits[-1] & ((1 << (half + 1)) - 1)
    j = feasible_below.bit_length() - 1  # sum 0 is always feasible
    subset: list[int] = []
    remaining = j
    for i in range(len(q) - 1, -1, -1):
        qi = int(q[i])
        if qi and remaining >= qi and (bits[i] >> (remaining - qi)) & 1:
            subset.append(i)
            remaining -= qi
    return (total - 2 * j) / q_scale, tuple(sorted(subset))


def brute_force_delta(profile: np.ndarray, q_scale: int = DEFAULT_Q_SCALE) -> float:
    """Exhaustive oracle: minimum |sum(S) - sum(complement)| over all 2^K subsets."""
    profile = np.asarray(profile, dtype=np.float64)
    if profile.size > 20:
        raise ValueError(f"brute force limited to K <= 20, got K={profile.size}")
    q = quantize_profile(profile, q_scale)
    total = int(q.sum())
    sums = np.zeros(1, dtype=np.int64)
    for qi in q:
        sums = np.concatenate([sums, sums + qi])
    return int(np.abs(total - 2 * sums).min()) / q_scale


@dataclass(frozen=True)
class InvariantPartition:
    """Disjoint invariant/variant channel index sets covering range(K)."""

    delta: float
    invariant: tuple[int, ...]
    variant: tuple[int, ...]

    @property
    def channels(self) -> int:
        return len(self.invariant) + len(self.variant)


def partition(profile: np.ndarray, delta: float, rule: str = "threshold", *,
              q_scale: int = DEFAULT_Q_SCALE,
              subset: tuple[int, ...] | None = None) -> InvariantPartition:
    """Split channels into invariant/variant sets.

    ``threshold`` keeps channels whose variance is at most
    ``mean(profile) - delta/2``; ``subset`` uses the smaller-sum side of the
    DP split instead.  An empty invariant set falls back to the single
    minimum-variance channel so the predictor is never starved.
    """
    profile = np.asarray(profile, dtype=np.float64)
    k = profile.size
    if rule == "threshold":
        cutoff = profile.mean() - delta / 2.0
        invariant = [i for i in range(k) if profile[i] <= cutoff + _CUTOFF_EPS]
    elif rule == "subset":
        if subset is None:
            _, subset = dp_delta(profile, q_scale)
        invariant = sorted(subset)
    else:
        raise ValueError(f"unknown partition rule: {rule!r}")
    if not invariant:
        invariant = [int(np.argmin(profile))]
    variant = [i for i in range(k) if i not in set(invariant)]
    return InvariantPartition(delta=float(delta), invariant=tuple(invariant), variant=tuple(variant))


def partition_all(var_matrix: np.ndarray, rule: str = "threshold",
                  q_scale: int = DEFAULT_Q_SCALE) -> list[InvariantPartition]:
    """Per-node DP + partition over an (N, K) variance matrix."""
    out = []
    for profile in np.asarray(var_matrix, dtype=np.float64):
        delta, subset = dp_delta(profile, q_scale)
        out.append(partition(profile, delta, rule, q_scale=q_scale, subset=subset))
    return out


def masks_from_partitions(partitions: list[InvariantPartition], channels: int) -> np.ndarray:
    """(N, K) float mask: 1 on invariant channels, 0 on variant ones."""
    mask = np.zeros((len(partitions), channels), dtype=np.float64)
    for v, part in enumerate(partitions):
        mask[v, list(part.invariant)] = 1.0
    return mask
