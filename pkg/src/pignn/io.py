"""Dataset directories and result files (layout documented in FORMAT.md)."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .datagen import EVENT_OPS, DatasetBundle, bundle_to_graph
from .errors import FormatError, VersionMismatch
from .graph import SPLIT_CODES, SPLIT_NAMES, DynamicGraph

DATASET_FORMAT = "pignn-dataset"
DATASET_VERSION = 1


def write_dataset(bundle: DatasetBundle, path, binary_features: bool = False) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(bundle.meta)
    meta.update(
        format=DATASET_FORMAT,
        version=DATASET_VERSION,
        num_nodes=len(bundle.node_ids),
        num_events=len(bundle.events),
        features="features.bin" if binary_features else "features.csv",
    )
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(out / "nodes.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "arrival", "label", "split"])
        for v, a, y, s in zip(bundle.node_ids, bundle.arrival, bundle.labels, bundle.splits):
            w.writerow([int(v), int(a), int(y), SPLIT_NAMES[int(s)]])
    if binary_features:
        (out / "features.bin").write_bytes(np.ascontiguousarray(bundle.features, dtype="<f8").tobytes())
    else:
        with open(out / "features.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id"] + [f"f{i}" for i in range(bundle.features.shape[1])])
            for v, row in zip(bundle.node_ids, bundle.features):
                w.writerow([int(v)] + [repr(float(x)) for x in row])
    with open(out / "events.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["snapshot", "op", "u", "v"])
        for t, op, u, v in bundle.events:
            w.writerow([t, op, u, "" if v < 0 else v])
    return out


def _rows(path: Path, header: list[str] | None):
    if not path.exists():
        raise FormatError(f"{path.name}: missing")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            first = next(reader)
        except StopIteration:
            raise FormatError(f"{path.name}: empty file") from None
        if header is not None and first != header:
            raise FormatError(f"{path.name} line 1: expected header {header}, got {first}")
        for lineno, row in enumerate(reader, start=2):
            yield lineno, first, row


def read_bundle(path) -> DatasetBundle:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{root}: meta.json missing") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"meta.json: {exc}") from exc
    if meta.get("format") != DATASET_FORMAT:
        raise FormatError("meta.json: not a pignn dataset")
    if meta.get("version") != DATASET_VERSION:
        raise VersionMismatch(f"dataset version {meta.get('version')} != {DATASET_VERSION}")
    d = int(meta["feature_dim"])

    ids, arrival, labels, splits = [], [], [], []
    for lineno, _, row in _rows(root / "nodes.csv", ["id", "arrival", "label", "split"]):
        try:
            v, a, y, s = row
            ids.append(int(v))
            arrival.append(int(a))
            labels.append(int(y))
            splits.append(SPLIT_CODES[s])
        except (ValueError, KeyError) as exc:
            raise FormatError(f"nodes.csv line {lineno}: bad record {row!r}") from exc
    if len(ids) != meta["num_nodes"]:
        raise FormatError(f"nodes.csv: {len(ids)} records, meta.json declares {meta['num_nodes']}")

    if meta.get("features") == "features.bin":
        raw = (root / "features.bin").read_bytes()
        if len(raw) != 8 * d * len(ids):
            raise FormatError(f"features.bin: {len(raw)} bytes, expected {8 * d * len(ids)}")
        features = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(len(ids), d)
    else:
        features = np.zeros((len(ids), d))
        pos = {v: r for r, v in enumerate(ids)}
        seen = 0
        for lineno, _, row in _rows(root / "features.csv", ["id"] + [f"f{i}" for i in range(d)]):
            try:
                if len(row) != d + 1:
                    raise ValueError
                features[pos[int(row[0])]] = [float(x) for x in row[1:]]
            except (ValueError, KeyError) as exc:
                raise FormatError(f"features.csv line {lineno}: bad record {row!r}") from exc
            seen += 1
        if seen != len(ids):
            raise FormatError(f"features.csv: {seen} records for {len(ids)} nodes")

    events = []
    for lineno, _, row in _rows(root / "events.csv", ["snapshot", "op", "u", "v"]):
        record = lineno - 2
        try:
            t, op, u, v = row
            if op not in EVENT_OPS:
                raise ValueError(op)
            v = -1 if v == "" else int(v)
            if op.endswith("edge") and v < 0:
                raise ValueError("edge event without second endpoint")
            events.append((int(t), op, int(u), v))
        except ValueError as exc:
            raise FormatError(f"events.csv record {record} (line {lineno}): bad event {row!r}") from exc
    if len(events) != meta["num_events"]:
        raise FormatError(
            f"events.csv: truncated at record {len(events)} "
            f"({len(events)} of {meta['num_events']} events present)"
        )
    meta = {k: v for k, v in meta.items() if k not in ("format", "version", "features")}
    return DatasetBundle(
        meta=meta,
        node_ids=np.array(ids, dtype=np.int64),
        arrival=np.array(arrival, dtype=np.int64),
        labels=np.array(labels, dtype=np.int64),
        splits=np.array(splits, dtype=np.int8),
        features=features,
        events=events,
    )


def read_dataset(path) -> DynamicGraph:
    return bundle_to_graph(read_bundle(path))


# -- results ------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def write_matrix_csv(matrix, path) -> None:
    T = matrix.T
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["after_task"] + [f"task_{j}" for j in range(1, T + 1)])
        for i in range(1, T + 1):
            w.writerow([i] + [_fmt(matrix[i, j]) for j in range(1, i + 1)] + [""] * (T - i))


def read_matrix_csv(path):
    from .metrics import AccuracyMatrix

    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "after_task":
        raise FormatError(f"{path}: not a matrix.csv")
    T = len(rows) - 1
    m = AccuracyMatrix(T)
    for i, row in enumerate(rows[1:], start=1):
        for j in range(1, i + 1):
            m[i, j] = float(row[j]) if row[j] != "" else float("nan")
    return m


def _clean(x):
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_results(run, path, activations: np.ndarray | None = None, activation_meta: dict | None = None) -> Path:
    """Write one run's files into ``path`` (one directory per seed)."""
    from .metrics import fm, pm

    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(run.accuracy_matrix, out / "matrix.csv")
    summary = {
        "method": run.method,
        "seed": run.seed,
        "T": run.accuracy_matrix.T,
        "PM": pm(run.accuracy_matrix),
        "FM": fm(run.accuracy_matrix),
        "losses": run.losses,
        "bound_terms": run.bound_terms,
        "widths": run.widths,
        "num_params": run.num_params,
        "memory_trace": run.memory_trace,
        "wall_clock": run.wall_clock,
        "notes": run.notes,
        "config": run.config,
    }
    write_json(summary, out / "summary.json")
    if activations is not None:
        write_activations(activations, out / "activations.csv", **(activation_meta or {}))
    return out


def write_activations(acts: np.ndarray, path, nodes=None, boundaries=None, tasks=None) -> None:
    n, w = acts.shape
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        if boundaries is not None:
            f.write("# block_boundaries=" + ",".join(str(b) for b in boundaries) + "\n")
        wr.writerow(["node", "task"] + [f"u{i}" for i in range(w)])
        for r in range(n):
            node = "" if nodes is None else int(nodes[r])
            task = "" if tasks is None else int(tasks[r])
            wr.writerow([node, task] + [repr(float(x)) for x in acts[r]])


def aggregate_runs(run_dir) -> dict:
    """Mean and sample std of PM/FM over every ``seed-*/summary.json`` under ``run_dir``."""
    rows = []
    for p in sorted(Path(run_dir).glob("seed-*/summary.json")):
        s = json.loads(p.read_text())
        rows.append(s)
    out = {"seeds": [r["seed"] for r in rows], "method": rows[0]["method"] if rows else None}
    for key in ("PM", "FM"):
        vals = np.array([r[key] for r in rows if r.get(key) is not None], dtype=float)
        out[key + "_mean"] = float(vals.mean()) if len(vals) else None
        out[key + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else (0.0 if len(vals) else None)
    return out


def write_aggregate(run_dir) -> dict:
    agg = aggregate_runs(run_dir)
    write_json(agg, Path(run_dir) / "aggregate.json")
    with open(Path(run_dir) / "aggregate.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "n_seeds", "PM_mean", "PM_std", "FM_mean", "FM_std"])
        w.writerow([agg["method"], len(agg["seeds"])] + [_fmt(agg[k]) for k in ("PM_mean", "PM_std", "FM_mean", "FM_std")])
    return agg


# -- checkpointed runs -----------------------------------------------------------------

_MODEL_KEYS = ("previous", "rectified", "expanded", "model")


def _decomposition_to_dict(d) -> dict:
    return {
        "k": d.k,
        "source_index": d.source_index,
        **{name: sorted(int(v) for v in getattr(d, name))
           for name in ("unstable_centers", "stable_centers", "changed_centers", "touched",
                        "removed_centers", "added_centers")},
    }


def _decomposition_from_dict(d: dict):
    from .graph import Decomposition

    sets = {name: frozenset(d[name]) for name in ("unstable_centers", "stable_centers", "changed_centers",
                                                   "touched", "removed_centers", "added_centers")}
    return Decomposition(k=d["k"], source_index=d["source_index"], **sets)


def save_run(run, path, checkpoints: bool = True) -> Path:
    """Result files plus ``model.json`` and, optionally, per-snapshot checkpoints."""
    from .nn import save_model

    out = write_results(run, path)
    save_model(run.final_model, out / "model.json")
    if not checkpoints:
        return out
    for t, ck in sorted(run.checkpoints.items()):
        d = out / "checkpoints" / f"t{t}"
        d.mkdir(parents=True, exist_ok=True)
        for key in _MODEL_KEYS:
            if key in ck:
                save_model(ck[key], d / f"{key}.json")
        if "decomposition" in ck:
            write_json(_decomposition_to_dict(ck["decomposition"]), d / "decomposition.json")
        for key in ("memory", "stable_memory"):
            if key in ck:
                m = ck[key]
                write_json({"center_nodes": list(m.center_nodes), "source_snapshot": m.source_snapshot, "k": m.k},
                           d / f"{key}.json")
    return out


def load_run(path, data: DynamicGraph):
    """Rebuild a RunResult (matrix, summary fields, final model, checkpoints) from ``path``."""
    from .algo import RunResult
    from .graph import MemoryBuffer
    from .nn import load_model

    root = Path(path)
    try:
        summary = json.loads((root / "summary.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{root}: summary.json missing") from None
    matrix = read_matrix_csv(root / "matrix.csv")
    final = load_model(root / "model.json") if (root / "model.json").exists() else None
    checkpoints = {}
    ck_root = root / "checkpoints"
    if ck_root.exists():
        for d in sorted(ck_root.glob("t*")):
            t = int(d.name[1:])
            ck = {key: load_model(d / f"{key}.json") for key in _MODEL_KEYS if (d / f"{key}.json").exists()}
            if (d / "decomposition.json").exists():
                ck["decomposition"] = _decomposition_from_dict(json.loads((d / "decomposition.json").read_text()))
            for key in ("memory", "stable_memory"):
                if (d / f"{key}.json").exists():
                    m = json.loads((d / f"{key}.json").read_text())
                    ck[key] = MemoryBuffer(tuple(m["center_nodes"]), m["source_snapshot"], m["k"])
            checkpoints[t] = ck
    return RunResult(
        method=summary["method"],
        seed=summary["seed"],
        accuracy_matrix=matrix,
        final_model=final,
        losses=summary.get("losses", {}),
        bound_terms=summary.get("bound_terms", []),
        memory_trace=summary.get("memory_trace", []),
        wall_clock=summary.get("wall_clock", {}),
        widths=summary.get("widths", []),
        checkpoints=checkpoints,
        notes=summary.get("notes", []),
        config=summary.get("config", {}),
        data=data,
    )
