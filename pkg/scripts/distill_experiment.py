"""Distil the final PI-GNN model into a smaller single-block student and
compare parameter counts and PM.

    python3 scripts/distill_experiment.py [--seeds 0,1,2] [--hidden 32]
"""
import argparse

from pignn.algo import TrainConfig, continual_run, distill_run
from pignn.datagen import GenConfig, bundle_to_graph, generate_stream
from pignn.metrics import pm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--hidden", type=int, default=32)
    args = ap.parse_args()
    for seed in (int(s) for s in args.seeds.split(",")):
        data = bundle_to_graph(generate_stream(GenConfig(seed=seed)))
        cfg = TrainConfig(seed=seed)
        run = continual_run(data, cfg)
        student, matrix = distill_run(run, cfg, args.hidden)
        t, s = run.final_model, student
        print(f"seed {seed}: teacher width {t.hidden_width} params {t.num_params()} PM {pm(run.accuracy_matrix):.4f} | "
              f"student width {s.hidden_width} params {s.num_params()} ({s.num_params() / t.num_params():.2f}x) "
              f"PM {pm(matrix):.4f}")


if __name__ == "__main__":
    main()
