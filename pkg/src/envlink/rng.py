"""Deterministic random number generation.

Every random draw in this package flows through :class:`Rng`, a counter-based
generator built on the SplitMix64 mixing function (an xorshift-multiply
finalizer).  The algorithm is spelled out below so a run can be reproduced
bit-for-bit from its seed alone, independent of library versions or platform:

* state: a 64-bit ``base`` derived from the seed plus a draw counter ``n``
* raw output n:  ``mix64(base + (n + 1) * 0x9E3779B97F4A7C15)  mod 2**64``
* ``mix64(x)``:  ``x ^= x >> 30;  x *= 0xBF58476D1CE4E5B9;  x ^= x >> 27;
  x *= 0x94D049BB133111EB;  x ^= x >> 31``  (all mod 2**64)
* uniform double in [0, 1): top 53 bits, ``(raw >> 11) * 2.0**-53``
* standard normals: Box-Muller over uniform pairs,
  ``r = sqrt(-2 ln(1 - u1));  (r cos(2 pi u2), r sin(2 pi u2))``
* integer below ``bound``: ``floor(uniform() * bound)`` (the ~bound/2**53
  modulo bias is accepted at desk scale)

Outputs are a pure function of ``(base, counter)``, so blocks of any size can
be generated with vectorized uint64 arithmetic without changing the stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    x &= _U64
    x ^= x >> 30
    x = (x * _MIX_A) & _U64
    x ^= x >> 27
    x = (x * _MIX_B) & _U64
    x ^= x >> 31
    return x


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps, matching the scalar mix64 exactly
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= np.uint64(_MIX_A)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_MIX_B)
    x ^= x >> np.uint64(31)
    return x


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, str):
        return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
    return int(tag) & _U64


def derive(seed: int, *tags: int | str) -> int:
    """Fold tags into a seed, yielding an independent substream seed.

    ``derive(seed, "negatives", epoch)`` and similar calls give each purpose
    and index its own decorrelated stream while staying reproducible.
    """
    s = mix64(seed)
    for tag in tags:
        s = mix64((s + _GOLDEN) ^ mix64(_tag_to_int(tag)))
    return s


class Rng:
    """Seeded counter-based random stream (see module docstring)."""

    def __init__(self, seed: int):
        self._base = mix64(int(seed) & _U64)
        self._n = 0

    def spawn(self, *tags: int | str) -> "Rng":
        """Child stream keyed by tags; independent of this stream's counter."""
        return Rng(derive(self._base, *tags))

    def _raw(self, count: int) -> np.ndarray:
        counters = np.arange(self._n + 1, self._n + count + 1, dtype=np.uint64)
        self._n += count
        return _mix64_array(np.uint64(self._base) + counters * np.uint64(_GOLDEN))

    def uniform(self, size: int | tuple[int, ...] | None = None) -> float | np.ndarray:
        """Uniform float64 draws in [0, 1)."""
        if size is None:
            return float((self._raw(1)[0] >> np.uint64(11))) * 2.0**-53
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, size: int | tuple[int, ...] | None = None) -> float | np.ndarray:
        """Standard normal draws via Box-Muller."""
        if size is None:
            return float(self.normal(1)[0])
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # in (0, 1], keeps log finite
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out.reshape(shape)

    def integer(self, bound: int) -> int:
        """One integer in [0, bound)."""
        if bound <= 0:
            raise ValueError(f"integer bound must be positive, got {bound}")
        return min(int(self.uniform() * bound), bound - 1)

    def integers(self, bound: int, size: int | tuple[int, ...]) -> np.ndarray:
        """Array of integers in [0, bound)."""
        if bound <= 0:
            raise ValueError(f"integer bound must be positive, got {bound}")
        u = self.uniform(size)
        return np.minimum((u * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        out = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def subset(self, n: int, m: int) -> np.ndarray:
        """m distinct indices drawn uniformly from range(n), seeded order."""
        if not 0 <= m <= n:
            raise ValueError(f"cannot pick {m} items from {n}")
        pool = np.arange(n, dtype=np.int64)
        for i in range(m):
            j = i + self.integer(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:m].copy()
