"""Dynamic-graph data model: snapshots, file formats, splits, negatives.

A dynamic graph is an ordered list of undirected edge-set snapshots over a
fixed node universe, with optional integer edge attributes and optional dense
node features of shape ``(N, T, d)``.  Edges are canonicalized to ``u < v``,
deduplicated, and stored lexicographically sorted so all downstream iteration
is deterministic.

File formats:

* edge list: UTF-8 text, one edge per line, whitespace-separated
  ``t u v [attr]`` with ``t in [0, T)`` and ``u, v in [0, N)``; ``attr`` is an
  optional nonnegative integer; lines starting with ``#`` are ignored.
* features: CSV with header ``node,t,f0,...,f{d-1}``; missing ``(node, t)``
  rows default to zeros.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng, derive

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


def _canonical_edges(edges, num_nodes: int, attrs=None):
    """Validate, canonicalize u < v, deduplicate (first attr wins), sort."""
    arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise DataError(f"node index out of range [0, {num_nodes})")
    if arr.size and (arr[:, 0] == arr[:, 1]).any():
        raise DataError("self-loops are not allowed")
    lo = arr.min(axis=1)
    hi = arr.max(axis=1)
    canon = np.stack([lo, hi], axis=1)
    keys = canon[:, 0] * num_nodes + canon[:, 1]
    uniq, first = np.unique(keys, return_index=True)
    out = np.stack([uniq // num_nodes, uniq % num_nodes], axis=1)
    if attrs is None:
        return out, None
    a = np.asarray(list(attrs), dtype=np.int64)
    if a.shape[0] != arr.shape[0]:
        raise DataError("attribute list length does not match edge list")
    return out, a[first]


@dataclass
class DynamicGraph:
    """Ordered snapshots sharing one node universe."""

    num_nodes: int
    snapshots: list[np.ndarray]
    attrs: list[np.ndarray] | None = None
    features: np.ndarray | None = None

    @classmethod
    def from_edges(cls, num_nodes: int, edge_lists, attr_lists=None, features=None) -> "DynamicGraph":
        snapshots, attrs = [], []
        for t, edges in enumerate(edge_lists):
            a = None if attr_lists is None else attr_lists[t]
            e, a = _canonical_edges(edges, num_nodes, a)
            snapshots.append(e)
            attrs.append(a)
        return cls(
            num_nodes=num_nodes,
            snapshots=snapshots,
            attrs=attrs if attr_lists is not None else None,
            features=None if features is None else np.asarray(features, dtype=np.float64),
        )

    @property
    def num_snapshots(self) -> int:
        return len(self.snapshots)

    def edge_set(self, t: int) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.snapshots[t]}

    def total_edges(self) -> int:
        return sum(len(s) for s in self.snapshots)

    def replace(self, *, snapshots=None, attrs="keep", features="keep") -> "DynamicGraph":
        return DynamicGraph(
            num_nodes=self.num_nodes,
            snapshots=[s.copy() for s in (self.snapshots if snapshots is None else snapshots)],
            attrs=self.attrs if attrs == "keep" else attrs,
            features=self.features if isinstance(features, str) else features,
        )


def load_edgelist(path, num_nodes: int, num_snapshots: int) -> DynamicGraph:
    """Parse the ``t u v [attr]`` edge-list format into a DynamicGraph."""
    edge_lists: list[list[tuple[int, int]]] = [[] for _ in range(num_snapshots)]
    attr_lists: list[list[int]] = [[] for _ in range(num_snapshots)]
    saw_attr = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 't u v [attr]', got {line!r}")
            try:
                values = [int(f) for f in fields]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            t, u, v = values[:3]
            if not 0 <= t < num_snapshots:
                raise DataError(f"{path}:{lineno}: snapshot index {t} outside [0, {num_snapshots})")
            if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                raise DataError(f"{path}:{lineno}: node index outside [0, {num_nodes})")
            if u == v:
                raise DataError(f"{path}:{lineno}: self-loop {u}-{v} not allowed")
            edge_lists[t].append((u, v))
            if len(values) == 4:
                if values[3] < 0:
                    raise DataError(f"{path}:{lineno}: attribute must be nonnegative")
                attr_lists[t].append(values[3])
                saw_attr = True
            else:
                attr_lists[t].append(-1)
    if saw_attr and any(a == -1 for attrs in attr_lists for a in attrs):
        raise DataError(f"{path}: attribute column present on some lines but not all")
    return DynamicGraph.from_edges(
        num_nodes, edge_lists, attr_lists=attr_lists if saw_attr else None
    )


def save_edgelist(path, g: DynamicGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, edges in enumerate(g.snapshots):
            attrs = g.attrs[t] if g.attrs is not None else None
            for i, (u, v) in enumerate(edges):
                if attrs is not None:
                    fh.write(f"{t} {u} {v} {attrs[i]}\n")
                else:
                    fh.write(f"{t} {u} {v}\n")


def load_features(path, num_nodes: int, num_snapshots: int) -> np.ndarray:
    """Parse the feature CSV; absent (node, t) rows stay zero."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["node", "t"]:
            raise DataError(f"{path}: feature header must start with 'node,t'")
        dim = len(header) - 2
        if dim <= 0 or header[2:] != [f"f{i}" for i in range(dim)]:
            raise DataError(f"{path}: feature columns must be f0..f{dim - 1}")
        out = np.zeros((num_nodes, num_snapshots, dim), dtype=np.float64)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise DataError(f"{path}:{lineno}: expected {dim + 2} columns")
            try:
                node, t = int(row[0]), int(row[1])
                values = [float(x) for x in row[2:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed row") from None
            if not (0 <= node < num_nodes and 0 <= t < num_snapshots):
                raise DataError(f"{path}:{lineno}: node/time index out of range")
            out[node, t] = values
    return out


def save_features(path, features: np.ndarray) -> None:
    n, t_len, dim = features.shape
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "t"] + [f"f{i}" for i in range(dim)])
        for v in range(n):
            for t in range(t_len):
                writer.writerow([v, t] + [repr(float(x)) for x in features[v, t]])


def default_features(num_nodes: int, num_snapshots: int, seed: int, dim: int = 32) -> np.ndarray:
    """Seeded standard-normal stand-in features when no file is supplied."""
    return Rng(derive(seed, "default-features")).normal((num_nodes, num_snapshots, dim))


# --------------------------------------------------------------------------
# splits and negative sampling


@dataclass
class SplitSpec:
    """Chronological train/val/test ranges with frozen evaluation edges.

    For every validation and test snapshot the positives are that snapshot's
    edges and the negatives are an equal count of seeded non-edges, fixed at
    split time so repeated evaluations see identical sets.
    """

    train_range: range
    val_range: range
    test_range: range
    positives: dict[int, np.ndarray] = field(default_factory=dict)
    negatives: dict[int, np.ndarray] = field(default_factory=dict)


def sample_negative_edges(g: DynamicGraph, t: int, count: int, seed: int,
                          exclude: np.ndarray | None = None) -> np.ndarray:
    """Uniformly sample distinct non-edges of snapshot t, deterministic per seed.

    ``exclude`` adds further forbidden pairs (e.g. withheld shifted edges that
    will re-enter as test positives).
    """
    n = g.num_nodes
    existing = g.edge_set(t)
    if exclude is not None and len(exclude):
        existing = existing | {(int(u), int(v)) for u, v in exclude}
    available = n * (n - 1) // 2 - len(existing)
    if count > available:
        raise DataError(f"requested {count} negatives but only {available} non-edges exist at t={t}")
    rng = Rng(seed)
    if count > available // 2:
        # dense snapshot: enumerate all non-edges and take a seeded subset
        pool = [(u, v) for u in range(n) for v in range(u + 1, n) if (u, v) not in existing]
        idx = rng.subset(len(pool), count)
        out = [pool[i] for i in idx]
        return np.asarray(out, dtype=np.int64).reshape(-1, 2)
    # sparse case: batched rejection sampling, first-acceptance order
    forbidden = {u * n + v for u, v in existing}
    keys: list[int] = []
    seen: set[int] = set(forbidden)
    while len(keys) < count:
        draw = rng.integers(n, (2 * max(count - len(keys), 32), 2))
        lo = draw.min(axis=1)
        hi = draw.max(axis=1)
        for u, v in zip(lo, hi):
            if u == v:
                continue
            key = int(u) * n + int(v)
            if key in seen:
                continue
            seen.add(key)
            keys.append(key)
            if len(keys) == count:
                break
    out = np.asarray(keys, dtype=np.int64)
    return np.stack([out // n, out % n], axis=1)


def chronological_split(g: DynamicGraph, train_n: int, val_n: int, test_n: int,
                        seed: int = 0, exclude: dict[int, np.ndarray] | None = None) -> SplitSpec:
    """Contiguous chronological split with frozen eval positives/negatives.

    ``exclude`` forbids extra per-snapshot pairs from the negative pools
    (used for edges withheld from the graph that return as test positives).
    """
    total = train_n + val_n + test_n
    if total != g.num_snapshots:
        raise DataError(
            f"split sizes {train_n}/{val_n}/{test_n} sum to {total}, graph has {g.num_snapshots} snapshots"
        )
    if min(train_n, val_n, test_n) < 0:
        raise DataError("split sizes must be nonnegative")
    split = SplitSpec(
        train_range=range(0, train_n),
        val_range=range(train_n, train_n + val_n),
        test_range=range(train_n + val_n, total),
    )
    for t in list(split.val_range) + list(split.test_range):
        pos = g.snapshots[t]
        split.positives[t] = pos.copy()
        split.negatives[t] = sample_negative_edges(
            g, t, len(pos), derive(seed, "split-neg", t),
            exclude=None if exclude is None else exclude.get(t),
        )
    return split


# --------------------------------------------------------------------------
# link-attribute distribution shift


def apply_attribute_filter(g: DynamicGraph, shifted_attr: int) -> tuple[DynamicGraph, list[np.ndarray]]:
    """Withhold every edge carrying the shifted attribute.

    Returns the training view (shifted edges removed, attributes stripped so
    no attribute information leaks into the model) and the per-snapshot lists
    of withheld edges, which re-enter only at test-time evaluation.
    """
    if g.attrs is None:
        raise DataError("attribute filter requires edge attributes")
    kept: list[np.ndarray] = []
    ood: list[np.ndarray] = []
    total_hits = 0
    for edges, attrs in zip(g.snapshots, g.attrs):
        mask = attrs == shifted_attr
        total_hits += int(mask.sum())
        kept.append(edges[~mask].copy())
        ood.append(edges[mask].copy())
    if total_hits == 0:
        log.warning("attribute %d not present in any snapshot; OOD set is empty", shifted_attr)
    train_view = DynamicGraph(
        num_nodes=g.num_nodes, snapshots=kept, attrs=None, features=g.features
    )
    return train_view, ood
