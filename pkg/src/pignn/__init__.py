"""Continual learning on dynamic graphs by parameter isolation and expansion."""
from .algo import RunResult, TrainConfig, continual_run, distill, distill_run
from .baselines import BaselineMethod, run_baseline
from .datagen import DatasetBundle, GenConfig, bundle_to_graph, generate_stream
from .graph import DynamicGraph, Snapshot, SnapshotDelta, apply_delta, decompose, diff_snapshots
from .metrics import AccuracyMatrix, accuracy, fm, pm
from .nn import ExpandableGNN, expand, forward, freeze_stable, init_model

__version__ = "0.1.0"
