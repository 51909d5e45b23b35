"""First-layer activations of test nodes per task, split by parameter block.

Trains PI-GNN on a T-task stream, then prints the mean activation of each
block for the test nodes of every task, and writes the raw matrix.

    python3 scripts/activation_blocks.py [--T 2] [--seed 0] [--layer 1] [--out results/activations.csv]
"""
import argparse
from pathlib import Path

import numpy as np

from pignn.algo import TrainConfig, continual_run
from pignn.datagen import GenConfig, bundle_to_graph, generate_stream
from pignn.graph import TEST
from pignn.io import write_activations
from pignn.verify import dump_activations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--layer", type=int, default=1)
    ap.add_argument("--out", default="results/activations.csv")
    args = ap.parse_args()
    data = bundle_to_graph(generate_stream(GenConfig(T=args.T, seed=args.seed)))
    run = continual_run(data, TrainConfig(seed=args.seed))
    s = data.snapshots[-1]
    nodes, tasks = [], []
    for task in range(1, data.T + 1):
        chosen = data.task_nodes(task, data.T, TEST)
        nodes.extend(int(v) for v in chosen)
        tasks.extend([task] * len(chosen))
    dump = dump_activations(run.final_model, s, nodes, args.layer)
    task_of = np.array(tasks)[np.argsort(nodes, kind="stable")]
    b = dump.boundaries
    for task in range(1, data.T + 1):
        sel = task_of == task
        means = [dump.values[sel, b[i]:b[i + 1]].mean() for i in range(len(b) - 1)]
        print(f"task {task} ({sel.sum()} nodes): " + "  ".join(f"block {i} {m:.3f}" for i, m in enumerate(means)))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_activations(dump.values, args.out, nodes=dump.nodes, boundaries=b, tasks=task_of)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
