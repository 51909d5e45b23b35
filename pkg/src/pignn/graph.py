"""Snapshots, deltas, ego-subgraphs and the stable/unstable decomposition.

Node ids are dense non-negative integers that are never reused once a node is
deleted. Graphs are undirected and simple (no self-loops, no multi-edges).
Adjacency is held in CSR form over the sorted node ids.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidDelta, SnapshotMismatch, UnknownNode

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")
SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}

Edge = tuple[int, int]


def _norm_edge(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True, eq=False)
class Snapshot:
    """One graph state G^t.

    ``features``, ``labels`` and ``splits`` are row-aligned with ``nodes``;
    the neighbours of ``nodes[r]`` are ``indices[indptr[r]:indptr[r + 1]]``
    (node ids, sorted ascending).
    """

    index: int
    nodes: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray

    @classmethod
    def from_edges(cls, index, nodes, features, labels, splits, edges: Iterable[Edge]) -> "Snapshot":
        nodes = np.asarray(nodes, dtype=np.int64)
        order = np.argsort(nodes, kind="stable")
        nodes = nodes[order]
        if len(nodes) and np.any(nodes[1:] == nodes[:-1]):
            raise InvalidDelta("duplicate node ids")
        features = np.asarray(features, dtype=np.float64)
        features = features.reshape(len(order), features.shape[-1] if features.ndim > 1 else -1)[order]
        labels = np.asarray(labels, dtype=np.int64)[order]
        splits = np.asarray(splits, dtype=np.int8)[order]
        n = len(nodes)
        pairs = {_norm_edge(int(u), int(v)) for u, v in edges}
        if pairs:
            e = np.array(sorted(pairs), dtype=np.int64)
            if np.any(e[:, 0] == e[:, 1]):
                raise InvalidDelta("self-loops are not allowed")
            src = np.concatenate([e[:, 0], e[:, 1]])
            dst = np.concatenate([e[:, 1], e[:, 0]])
            rs = np.searchsorted(nodes, src)
            ok = (rs < n) & (nodes[np.minimum(rs, n - 1)] == src) if n else np.zeros(len(src), bool)
            rd = np.searchsorted(nodes, dst)
            ok &= (rd < n) & (nodes[np.minimum(rd, n - 1)] == dst) if n else ok
            if not np.all(ok):
                raise InvalidDelta("edge endpoint is not a node of the snapshot")
            order = np.lexsort((dst, rs))
            indices = dst[order]
            counts = np.bincount(rs, minlength=n)
        else:
            indices = np.zeros(0, dtype=np.int64)
            counts = np.zeros(n, dtype=np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(int(index), nodes, indptr, indices, features, labels, splits)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def has_node(self, v: int) -> bool:
        r = np.searchsorted(self.nodes, v)
        return bool(r < len(self.nodes) and self.nodes[r] == v)

    def row(self, v: int) -> int:
        r = int(np.searchsorted(self.nodes, v))
        if r >= len(self.nodes) or self.nodes[r] != v:
            raise UnknownNode(v)
        return r

    def rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        r = np.searchsorted(self.nodes, ids)
        n = len(self.nodes)
        bad = (r >= n) | (self.nodes[np.minimum(r, max(n - 1, 0))] != ids) if n else np.ones(len(ids), bool)
        if np.any(bad):
            raise UnknownNode(int(ids[np.argmax(bad)]))
        return r

    def neighbors(self, v: int) -> np.ndarray:
        r = self.row(v)
        return self.indices[self.indptr[r]:self.indptr[r + 1]]

    def degree(self, v: int) -> int:
        r = self.row(v)
        return int(self.indptr[r + 1] - self.indptr[r])

    def node_set(self) -> frozenset[int]:
        return frozenset(int(v) for v in self.nodes)

    def edge_set(self) -> set[Edge]:
        rows = np.repeat(self.nodes, np.diff(self.indptr))
        keep = rows < self.indices
        return {(int(u), int(v)) for u, v in zip(rows[keep], self.indices[keep])}

    def adjacency(self) -> dict[int, tuple[int, ...]]:
        return {
            int(v): tuple(int(u) for u in self.indices[self.indptr[r]:self.indptr[r + 1]])
            for r, v in enumerate(self.nodes)
        }

    def nodes_in_split(self, split: int) -> np.ndarray:
        return self.nodes[self.splits == split]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (
            self.index == other.index
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.splits, other.splits)
        )

    __hash__ = None


@dataclass(frozen=True)
class NewNode:
    id: int
    features: tuple[float, ...]
    label: int
    split: int


@dataclass(frozen=True)
class SnapshotDelta:
    added_nodes: tuple[NewNode, ...] = ()
    deleted_nodes: tuple[int, ...] = ()
    added_edges: tuple[Edge, ...] = ()
    deleted_edges: tuple[Edge, ...] = ()

    def is_empty(self) -> bool:
        return not (self.added_nodes or self.deleted_nodes or self.added_edges or self.deleted_edges)


@dataclass
class DynamicGraph:
    snapshots: list[Snapshot]
    deltas: list[SnapshotDelta]
    num_classes: int
    feature_dim: int
    # snapshot index at which each node id first appeared
    arrival: dict[int, int] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.snapshots)

    def check(self) -> None:
        if len(self.deltas) != len(self.snapshots) - 1:
            raise InvalidDelta("need exactly T-1 deltas")
        for t, delta in enumerate(self.deltas):
            if apply_delta(self.snapshots[t], delta) != self.snapshots[t + 1]:
                raise InvalidDelta(f"delta {t} does not reproduce snapshot {t + 2}")

    def task_nodes(self, task: int, t: int, split: int | None = TEST) -> np.ndarray:
        """Nodes that arrived at snapshot ``task`` and still exist at snapshot ``t``."""
        s = self.snapshots[t - 1]
        mask = np.array([self.arrival.get(int(v)) == task for v in s.nodes], dtype=bool)
        if split is not None:
            mask &= s.splits == split
        return s.nodes[mask]


def _validate(prev: Snapshot, delta: SnapshotDelta) -> None:
    prev_nodes = prev.node_set()
    added = [a.id for a in delta.added_nodes]
    if len(set(added)) != len(added):
        raise InvalidDelta("node added twice")
    for v in added:
        if v in prev_nodes:
            raise InvalidDelta(f"added node {v} already exists")
        if v < 0:
            raise InvalidDelta(f"negative node id {v}")
    deleted = set(delta.deleted_nodes)
    if len(deleted) != len(delta.deleted_nodes):
        raise InvalidDelta("node deleted twice")
    for v in deleted:
        if v not in prev_nodes:
            raise InvalidDelta(f"deleted node {v} does not exist")
    prev_edges = prev.edge_set()
    for u, v in delta.deleted_edges:
        if _norm_edge(u, v) not in prev_edges:
            raise InvalidDelta(f"deleted edge {(u, v)} does not exist")
    alive = (prev_nodes - deleted) | set(added)
    seen = set()
    for u, v in delta.added_edges:
        e = _norm_edge(u, v)
        if u == v:
            raise InvalidDelta("self-loops are not allowed")
        if e in prev_edges or e in seen:
            raise InvalidDelta(f"added edge {e} already exists")
        if u not in alive or v not in alive:
            raise InvalidDelta(f"added edge {e} has a missing endpoint")
        seen.add(e)
    d = prev.feature_dim
    for a in delta.added_nodes:
        if len(a.features) != d:
            raise InvalidDelta(f"node {a.id} has feature dimension {len(a.features)}, expected {d}")


def apply_delta(prev: Snapshot, delta: SnapshotDelta) -> Snapshot:
    _validate(prev, delta)
    deleted = set(delta.deleted_nodes)
    keep = np.array([int(v) not in deleted for v in prev.nodes], dtype=bool)
    edges = {
        e for e in prev.edge_set()
        if e[0] not in deleted and e[1] not in deleted
    }
    edges -= {_norm_edge(u, v) for u, v in delta.deleted_edges}
    edges |= {_norm_edge(u, v) for u, v in delta.added_edges}
    add = delta.added_nodes
    nodes = np.concatenate([prev.nodes[keep], np.array([a.id for a in add], dtype=np.int64)])
    feats = np.vstack([prev.features[keep], np.array([a.features for a in add], dtype=np.float64).reshape(len(add), prev.feature_dim)])
    labels = np.concatenate([prev.labels[keep], np.array([a.label for a in add], dtype=np.int64)])
    splits = np.concatenate([prev.splits[keep], np.array([a.split for a in add], dtype=np.int8)])
    return Snapshot.from_edges(prev.index + 1, nodes, feats, labels, splits, edges)


def diff_snapshots(prev: Snapshot, next: Snapshot) -> SnapshotDelta:
    if prev.feature_dim != next.feature_dim:
        raise InvalidDelta("snapshots differ in feature dimension")
    pn, nn = prev.node_set(), next.node_set()
    added_ids = sorted(nn - pn)
    deleted = sorted(pn - nn)
    gone = set(deleted)
    pe, ne = prev.edge_set(), next.edge_set()
    added_nodes = []
    for v in added_ids:
        r = next.row(v)
        added_nodes.append(NewNode(v, tuple(float(x) for x in next.features[r]), int(next.labels[r]), int(next.splits[r])))
    return SnapshotDelta(
        added_nodes=tuple(added_nodes),
        deleted_nodes=tuple(deleted),
        added_edges=tuple(sorted(ne - pe)),
        deleted_edges=tuple(sorted(e for e in pe - ne if e[0] not in gone and e[1] not in gone)),
    )


def within_k_hops(s: Snapshot, sources: Iterable[int], k: int) -> frozenset[int]:
    """Multi-source BFS: every node at hop distance <= k from some source."""
    dist = {}
    queue = deque()
    for v in sources:
        s.row(v)
        if v not in dist:
            dist[v] = 0
            queue.append(v)
    while queue:
        v = queue.popleft()
        if dist[v] == k:
            continue
        for u in s.neighbors(v):
            u = int(u)
            if u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return frozenset(dist)


def k_hop_ego(s: Snapshot, center: int, k: int) -> frozenset[int]:
    if k < 0:
        raise ValueError("k must be non-negative")
    return within_k_hops(s, [int(center)], k)


@dataclass(frozen=True)
class Decomposition:
    """Center-node partition of G^{t-1} against the delta producing G^t.

    ``unstable_centers`` and ``stable_centers`` partition the surviving nodes
    of G^{t-1}; nodes deleted by the delta are listed in ``removed_centers``.
    """

    unstable_centers: frozenset[int]
    stable_centers: frozenset[int]
    changed_centers: frozenset[int]
    k: int
    source_index: int
    touched: frozenset[int] = frozenset()
    removed_centers: frozenset[int] = frozenset()
    added_centers: frozenset[int] = frozenset()


def touched_nodes(prev: Snapshot, delta: SnapshotDelta) -> frozenset[int]:
    deleted = set(delta.deleted_nodes)
    alive = prev.node_set() - deleted
    touched = set()
    for u, v in (*delta.added_edges, *delta.deleted_edges):
        touched.update(x for x in (u, v) if x in alive)
    for v in deleted:
        touched.update(int(u) for u in prev.neighbors(v) if int(u) in alive)
    return frozenset(touched)


def decompose(prev: Snapshot, delta: SnapshotDelta, k: int) -> Decomposition:
    if k < 1:
        raise ValueError("k must be >= 1")
    _validate(prev, delta)
    deleted = frozenset(delta.deleted_nodes)
    survivors = prev.node_set() - deleted
    touched = touched_nodes(prev, delta)
    # buffer-zone nodes (within k hops but untouched) count as unstable
    near = within_k_hops(prev, touched, k)
    unstable = frozenset(survivors & near)
    stable = frozenset(survivors - near)
    added = frozenset(a.id for a in delta.added_nodes)
    return Decomposition(
        unstable_centers=unstable,
        stable_centers=stable,
        changed_centers=unstable | added,
        k=k,
        source_index=prev.index,
        touched=touched,
        removed_centers=deleted,
        added_centers=added,
    )


@dataclass(frozen=True)
class MemoryBuffer:
    center_nodes: tuple[int, ...]
    source_snapshot: int
    k: int = 2


def sample_memory(s: Snapshot, size: int, seed: int, k: int = 2, pool: Sequence[int] | None = None) -> MemoryBuffer:
    """Uniform sample without replacement of ``min(size, |pool|)`` centers.

    ``pool`` defaults to every node of ``s``.
    """
    if size < 0:
        raise ValueError("memory size must be >= 0")
    candidates = s.nodes if pool is None else np.asarray(sorted(set(int(v) for v in pool)), dtype=np.int64)
    if size >= len(candidates):
        picked = candidates
    else:
        rng = np.random.default_rng(seed)
        picked = rng.choice(candidates, size=size, replace=False)
    return MemoryBuffer(tuple(sorted(int(v) for v in picked)), s.index, k)


def stable_memory_subset(mem: MemoryBuffer, d: Decomposition) -> MemoryBuffer:
    if mem.source_snapshot != d.source_index:
        raise SnapshotMismatch(f"memory from snapshot {mem.source_snapshot}, decomposition of {d.source_index}")
    return MemoryBuffer(tuple(v for v in mem.center_nodes if v in d.stable_centers), mem.source_snapshot, mem.k)


# -- neighbour sampling -------------------------------------------------------
# Each (seed, layer, v, u) gets a hashed key; a node's sample is the fanout
# neighbours with the smallest keys, so a sample depends only on (seed, v,
# layer) and N(v), never on the rest of the graph.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def _edge_keys(seed: int, layer: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        base = _splitmix(np.array([seed & _MASK], dtype=np.uint64))
        base = _splitmix(base ^ np.uint64(layer & _MASK))
        x = _splitmix(base ^ rows.astype(np.uint64))
        return _splitmix(x ^ cols.astype(np.uint64))


def sample_neighbors(s: Snapshot, v: int, fanout, seed: int, layer: int = 0) -> list[int]:
    nbrs = s.neighbors(v)
    if fanout == "all" or fanout >= len(nbrs):
        return [int(u) for u in nbrs]
    if fanout < 1:
        raise ValueError("fanout must be >= 1 or 'all'")
    keys = _edge_keys(seed, layer, np.full(len(nbrs), v, dtype=np.int64), nbrs)
    pick = np.argsort(keys, kind="stable")[:fanout]
    return sorted(int(u) for u in nbrs[pick])


def sampled_csr(s: Snapshot, fanout, seed: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-sampled CSR (indptr, column rows) for the whole snapshot."""
    deg = np.diff(s.indptr)
    cols = s.rows(s.indices) if len(s.indices) else np.zeros(0, dtype=np.int64)
    if fanout == "all" or len(deg) == 0 or deg.max(initial=0) <= fanout:
        return s.indptr, cols
    rowpos = np.repeat(np.arange(len(deg)), deg)
    keys = _edge_keys(seed, layer, s.nodes[rowpos], s.indices)
    order = np.lexsort((keys, rowpos))
    rank = np.arange(len(order)) - s.indptr[rowpos]
    keep = np.sort(order[rank < fanout])
    indptr = np.zeros(len(deg) + 1, dtype=np.int64)
    np.cumsum(np.minimum(deg, fanout), out=indptr[1:])
    return indptr, cols[keep]
