"""Seeded class-incremental dynamic-graph generator."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigInvalid
from .graph import SPLIT_NAMES, TEST, TRAIN, VAL, DynamicGraph, NewNode, Snapshot, SnapshotDelta, apply_delta

EVENT_OPS = ("add_node", "del_node", "add_edge", "del_edge")


@dataclass
class GenConfig:
    T: int = 6
    classes_per_task: int = 1
    nodes_per_class_per_task: int = 100
    # arrivals per already-introduced class in each later task
    nodes_per_old_class: int = 0
    feature_dim: int = 16
    p_in: float = 0.03
    p_out: float = 0.002
    p_back: float = 0.0001
    # restrict back edges to earlier nodes of the same class
    back_same_class: bool = False
    p_del_node: float = 0.0
    p_del_edge: float = 0.0
    noise_sigma: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("p_in", "p_out", "p_back", "p_del_node", "p_del_edge"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigInvalid(f"{name}={p} is not a probability")
        for name in ("T", "classes_per_task", "nodes_per_class_per_task", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be >= 1")
        if self.nodes_per_old_class < 0:
            raise ConfigInvalid("nodes_per_old_class must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigInvalid("noise_sigma must be >= 0")

    @property
    def num_classes(self) -> int:
        return self.T * self.classes_per_task


@dataclass
class DatasetBundle:
    """Flat, serialisable form of a dynamic graph.

    ``node_ids``/``arrival``/``labels``/``splits``/``features`` are row-aligned
    and cover every node that ever existed. ``events`` are
    ``(snapshot, op, u, v)`` with ``v = -1`` for node events.
    """

    meta: dict
    node_ids: np.ndarray
    arrival: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    features: np.ndarray
    events: list[tuple[int, str, int, int]] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.events == other.events
            and all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("node_ids", "arrival", "labels", "splits", "features"))
        )

    __hash__ = None


def _assign_splits(final_ids: list[int], arrival: dict[int, int], rng: np.random.Generator) -> dict[int, int]:
    # cyclic train/train/train/val/test over task-grouped shuffled nodes:
    # 60/20/20 within one node overall, and every task of >= 5 nodes gets a test node
    pattern = (TRAIN, TRAIN, TRAIN, VAL, TEST)
    ordered = []
    for task in sorted(set(arrival[v] for v in final_ids)):
        group = np.array([v for v in final_ids if arrival[v] == task])
        ordered.extend(int(v) for v in rng.permutation(group))
    return {v: pattern[p % 5] for p, v in enumerate(ordered)}


def generate_stream(g: GenConfig) -> DatasetBundle:
    g.validate()
    rng = np.random.default_rng(g.seed)
    d, c, m = g.feature_dim, g.classes_per_task, g.nodes_per_class_per_task
    means = rng.normal(size=(g.num_classes, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    arrival, labels, feats = {}, {}, {}
    alive: list[int] = []
    edges: set[tuple[int, int]] = set()
    events: list[tuple[int, str, int, int]] = []
    next_id = 0
    for t in range(1, g.T + 1):
        if t > 1:
            gone = [v for v in alive if rng.random() < g.p_del_node]
            gone_set = set(gone)
            for v in gone:
                events.append((t, "del_node", v, -1))
            edges = {e for e in edges if e[0] not in gone_set and e[1] not in gone_set}
            alive = [v for v in alive if v not in gone_set]
            dropped = [e for e in sorted(edges) if rng.random() < g.p_del_edge]
            for u, v in dropped:
                events.append((t, "del_edge", u, v))
            edges -= set(dropped)
        cohort, cohort_cls = [], []
        arrivals = [(cls, g.nodes_per_old_class) for cls in range((t - 1) * c)]
        arrivals += [((t - 1) * c + k, m) for k in range(c)]
        for cls, count in arrivals:
            x = means[cls] + g.noise_sigma * rng.normal(size=(count, d))
            for row in x:
                v = next_id
                next_id += 1
                arrival[v], labels[v], feats[v] = t, cls, row
                cohort.append(v)
                cohort_cls.append(cls)
                events.append((t, "add_node", v, -1))
        new_edges = []
        cls_arr = np.array(cohort_cls)
        n_new = len(cohort)
        draws = rng.random((n_new, n_new))
        for a in range(n_new):
            for b in range(a + 1, n_new):
                p = g.p_in if cls_arr[a] == cls_arr[b] else g.p_out
                if draws[a, b] < p:
                    new_edges.append((cohort[a], cohort[b]))
        if alive:
            back = rng.random((n_new, len(alive)))
            old_cls = np.array([labels[v] for v in alive])
            hits = back < g.p_back
            if g.back_same_class:
                hits &= cls_arr[:, None] == old_cls[None, :]
            for a, b in zip(*np.nonzero(hits)):
                new_edges.append((alive[b], cohort[a]))
        for u, v in sorted(new_edges):
            events.append((t, "add_edge", u, v))
            edges.add((u, v))
        alive = alive + cohort

    splits = _assign_splits(alive, arrival, rng)
    ids = np.arange(next_id, dtype=np.int64)
    leftover = [v for v in ids if int(v) not in splits]
    extra = rng.choice(3, size=len(leftover), p=[0.6, 0.2, 0.2]) if leftover else []
    for v, sp in zip(leftover, extra):
        splits[int(v)] = int(sp)
    meta = {
        "feature_dim": d,
        "num_classes": g.num_classes,
        "T": g.T,
        "num_nodes": int(next_id),
        "num_events": len(events),
        "generator": asdict(g),
    }
    return DatasetBundle(
        meta=meta,
        node_ids=ids,
        arrival=np.array([arrival[int(v)] for v in ids], dtype=np.int64),
        labels=np.array([labels[int(v)] for v in ids], dtype=np.int64),
        splits=np.array([splits[int(v)] for v in ids], dtype=np.int8),
        features=np.array([feats[int(v)] for v in ids], dtype=np.float64).reshape(len(ids), d),
        events=events,
    )


def bundle_to_graph(bundle: DatasetBundle) -> DynamicGraph:
    """Replay the event log into snapshots and deltas."""
    d = int(bundle.meta["feature_dim"])
    T = int(bundle.meta["T"])
    row = {int(v): r for r, v in enumerate(bundle.node_ids)}
    by_t: dict[int, dict[str, list]] = {t: {op: [] for op in EVENT_OPS} for t in range(1, T + 1)}
    for t, op, u, v in bundle.events:
        by_t[t][op].append((u, v))

    def delta_for(t: int) -> SnapshotDelta:
        ev = by_t[t]
        return SnapshotDelta(
            added_nodes=tuple(
                NewNode(u, tuple(float(x) for x in bundle.features[row[u]]), int(bundle.labels[row[u]]), int(bundle.splits[row[u]]))
                for u, _ in ev["add_node"]
            ),
            deleted_nodes=tuple(u for u, _ in ev["del_node"]),
            added_edges=tuple((u, v) for u, v in ev["add_edge"]),
            deleted_edges=tuple((u, v) for u, v in ev["del_edge"]),
        )

    empty = Snapshot.from_edges(0, [], np.zeros((0, d)), [], [], [])
    snaps = [apply_delta(empty, delta_for(1))]
    deltas = []
    for t in range(2, T + 1):
        delta = delta_for(t)
        deltas.append(delta)
        snaps.append(apply_delta(snaps[-1], delta))
    arrival = {int(v): int(a) for v, a in zip(bundle.node_ids, bundle.arrival)}
    return DynamicGraph(snaps, deltas, int(bundle.meta["num_classes"]), d, arrival)


def split_name(code: int) -> str:
    return SPLIT_NAMES[code]
