"""Bound report, loss-partition errors and the residual tightening curve for
one PI-GNN run on the synthetic stream.

    python3 scripts/bound_check.py [--seed 0] [--T 6]
"""
import argparse

from pignn.algo import TrainConfig, continual_run
from pignn.datagen import GenConfig, bundle_to_graph, generate_stream
from pignn.verify import partition_identities, tightness_curve, verify_theorem


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--T", type=int, default=6)
    args = ap.parse_args()
    data = bundle_to_graph(generate_stream(GenConfig(T=args.T, seed=args.seed)))
    run = continual_run(data, TrainConfig(seed=args.seed))
    for r, p in zip(verify_theorem(run), partition_identities(run)):
        lam = tightness_curve(run, r.t, lam_only=True)
        full = tightness_curve(run, r.t, lam_only=False)
        print(f"t={r.t} changed {r.n_changed} stable {r.n_stable} lhs {r.lhs:.3f} gap {r.gap:.3f} "
              f"premise {r.preconditions_met:.3f} min node gap {r.conditional_min:.3g} ok {r.ok}")
        print(f"     partition errors {p['before']:.1e} {p['after']:.1e}; residual 0/50/100 epochs "
              f"lambda-only {' '.join(f'{x:.1f}' for x in lam)} | full objective {' '.join(f'{x:.1f}' for x in full)}")


if __name__ == "__main__":
    main()
