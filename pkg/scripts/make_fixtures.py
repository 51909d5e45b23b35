"""Regenerate the committed fixture runs under tests/fixtures/.

A small stream (T = 3) is trained with PI-GNN and OnlineGNN for seeds 0 and 1
through the CLI. Only the files `eval` reads are kept, and each run gets an
``eval.golden.txt`` with the table printed by ``pignn eval``.

    python3 scripts/make_fixtures.py
"""
import contextlib
import io
import json
import shutil
from pathlib import Path

from pignn.cli import main

ROOT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"
GEN = {"T": 3, "nodes_per_class_per_task": 40, "feature_dim": 8, "p_in": 0.08, "noise_sigma": 0.6, "seed": 7}
TRAIN = {"epochs_initial": 150, "epochs_rectify": 5, "epochs_isolate": 40, "memory_size": 64}
KEEP = {"config.resolved.json", "matrix.csv", "summary.json"}


def run(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    if code != 0:
        raise SystemExit(f"{argv} exited {code}")
    return buf.getvalue()


def prune(run_dir: Path):
    for p in sorted(run_dir.rglob("*"), reverse=True):
        if p.is_dir():
            if not any(p.iterdir()):
                p.rmdir()
        elif p.name not in KEEP:
            p.unlink()
    # drop per-epoch loss traces; the eval golden does not depend on them
    for p in run_dir.glob("seed-*/summary.json"):
        s = json.loads(p.read_text())
        s["losses"] = {}
        s["memory_trace"] = []
        p.write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    data = ROOT / "small-stream"
    runs = ROOT / "runs"
    shutil.rmtree(data, ignore_errors=True)
    shutil.rmtree(runs, ignore_errors=True)
    cfg = ROOT / "small-config.json"
    cfg.write_text(json.dumps({**GEN, **TRAIN}, indent=2) + "\n")
    run(["generate", "--config", str(cfg), "--out", str(data)])
    for method in ("pi-gnn", "online"):
        out = runs / method
        run(["train", "--data", str(data), "--method", method, "--config", str(cfg), "--out", str(out),
             "--seeds", "0,1", "--no-checkpoints"])
        prune(out)
        (out / "eval.golden.txt").write_text(run(["eval", "--run", str(out)]))
        print((out / "eval.golden.txt").read_text())
