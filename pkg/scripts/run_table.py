"""PM/FM of all four methods on the synthetic class-incremental stream.

    python3 scripts/run_table.py [--seeds 0,1,2] [--T 6] [--out results/table.csv]
"""
import argparse
import csv
import time
from pathlib import Path

import numpy as np

from pignn.algo import TrainConfig, continual_run
from pignn.baselines import BaselineMethod, run_baseline
from pignn.datagen import GenConfig, bundle_to_graph, generate_stream
from pignn.metrics import fm, pm

METHODS = ("retrain", "pi-gnn", "online", "pretrain")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--T", type=int, default=6)
    ap.add_argument("--protocol", default="snapshot", choices=("snapshot", "arrival"))
    ap.add_argument("--out", default="results/table.csv")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    scores = {m: {"PM": [], "FM": []} for m in METHODS}
    tick = time.perf_counter()
    for seed in seeds:
        data = bundle_to_graph(generate_stream(GenConfig(T=args.T, seed=seed)))
        cfg = TrainConfig(seed=seed, eval_protocol=args.protocol)
        for method in METHODS:
            run = continual_run(data, cfg) if method == "pi-gnn" else run_baseline(BaselineMethod(method), data, cfg)
            scores[method]["PM"].append(pm(run.accuracy_matrix))
            scores[method]["FM"].append(fm(run.accuracy_matrix))
            print(f"seed {seed} {method:<9} PM {scores[method]['PM'][-1]:.4f} FM {scores[method]['FM'][-1]:+.4f}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "PM_mean", "PM_std", "FM_mean", "FM_std"])
        for m in METHODS:
            p, q = np.array(scores[m]["PM"]), np.array(scores[m]["FM"])
            sd = lambda x: x.std(ddof=1) if len(x) > 1 else 0.0
            w.writerow([m, f"{p.mean():.4f}", f"{sd(p):.4f}", f"{q.mean():.4f}", f"{sd(q):.4f}"])
            print(f"{m:<9} PM {100 * p.mean():6.2f}±{100 * sd(p):.2f}  FM {100 * q.mean():+6.2f}±{100 * sd(q):.2f}")
    print(f"{time.perf_counter() - tick:.0f}s, wrote {out}")


if __name__ == "__main__":
    main()
