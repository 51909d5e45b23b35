"""Small streams and fast configs shared by the unit tests."""
import numpy as np

from pignn.algo import TrainConfig
from pignn.datagen import GenConfig, bundle_to_graph, generate_stream
from pignn.graph import DynamicGraph, SnapshotDelta, apply_delta

FAST = dict(epochs_initial=60, epochs_rectify=3, epochs_isolate=15, epochs_distill=30, memory_size=32)


def small_stream(T=3, seed=0, **kw):
    base = dict(T=T, nodes_per_class_per_task=30, feature_dim=6, p_in=0.1, seed=seed)
    base.update(kw)
    return bundle_to_graph(generate_stream(GenConfig(**base)))


def fast_cfg(**kw):
    return TrainConfig(**{**FAST, **kw})


def constant_stream(data: DynamicGraph, T: int) -> DynamicGraph:
    """Repeat the first snapshot of ``data`` T times with empty deltas."""
    snaps = [data.snapshots[0]]
    for _ in range(T - 1):
        snaps.append(apply_delta(snaps[-1], SnapshotDelta()))
    return DynamicGraph(snaps, [SnapshotDelta()] * (T - 1), data.num_classes, data.feature_dim,
                        {int(v): 1 for v in snaps[0].nodes})


def weights_equal(a, b) -> bool:
    return a.params.keys() == b.params.keys() and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
