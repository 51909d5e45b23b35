"""Command-line front end.

    pignn generate --config G --out DIR
    pignn train --data DIR --method {pi-gnn,retrain,pretrain,online} --config C --out RUN [--seeds 0,1,2]
    pignn distill --run RUN --hidden 32
    pignn eval --run RUN
    pignn verify --suite {lemma,theorem,gradcheck,decompose} [--run RUN]
    pignn activations --run RUN --layer 1 --tasks 1,2

Exit status: 0 success, 1 usage or input error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .algo import TrainConfig, continual_run, distill_run
from .baselines import BaselineMethod, run_baseline
from .datagen import GenConfig, generate_stream
from .errors import ConfigInvalid, PignnError
from .graph import TEST
from .metrics import fm, pm
from .nn import save_model

METHODS = ("pi-gnn", "retrain", "pretrain", "online")
SUITES = ("lemma", "theorem", "gradcheck", "decompose")
EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for verification failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class CliConfig:
    """One JSON file may hold generator keys, training keys, ``method`` and ``seeds``."""

    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    method: str = "pi-gnn"
    seeds: list = field(default_factory=lambda: [0])

    @classmethod
    def from_dict(cls, d: dict) -> "CliConfig":
        gen_keys = {f.name for f in fields(GenConfig)}
        train_keys = {f.name for f in fields(TrainConfig)} | set(TrainConfig._aliases)
        gen, train, out = {}, {}, cls()
        for key, value in d.items():
            if key == "method":
                if value not in METHODS:
                    raise ConfigInvalid(f"unknown method {value!r}")
                out.method = value
            elif key == "seeds":
                out.seeds = [int(s) for s in value]
            elif key in gen_keys and key != "seed":
                gen[key] = value
            elif key in train_keys:
                train[key] = value
            else:
                raise ConfigInvalid(f"unknown config key {key!r}")
        # "seed" is shared: it seeds both the generator and training
        if "seed" in d:
            gen["seed"] = d["seed"]
        out.gen = GenConfig(**gen)
        out.gen.validate()
        out.train = TrainConfig.from_dict(train)
        return out


def load_config(path) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"config file {path}: expected a JSON object")
    return CliConfig.from_dict(d)


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pignn", description="Continual learning on dynamic graphs by parameter isolation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic class-incremental dataset")
    g.add_argument("--config", help="JSON file with generator keys (unknown keys rejected)")
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--seed", type=int, help="generator seed (overrides the config)")
    g.add_argument("--binary-features", action="store_true", help="store features as little-endian float64")

    t = sub.add_parser("train", help="run one method over a dataset for one or more seeds")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--method", choices=METHODS, help="method (default: config 'method' or pi-gnn)")
    t.add_argument("--config", help="JSON file with training keys (unknown keys rejected)")
    t.add_argument("--out", required=True, help="run directory to create")
    t.add_argument("--seeds", type=_seed_list, help="comma-separated training seeds, e.g. 0,1,2")
    t.add_argument("--no-checkpoints", action="store_true", help="skip per-snapshot model checkpoints")

    d = sub.add_parser("distill", help="compress the final model of every seed in a run")
    d.add_argument("--run", required=True, help="run directory")
    d.add_argument("--hidden", type=int, default=32, help="student hidden width (default 32)")
    d.add_argument("--epochs", type=int, help="student epochs (default: config epochs_distill)")

    e = sub.add_parser("eval", help="print the PM/FM table of a run")
    e.add_argument("--run", required=True, help="run directory")

    v = sub.add_parser("verify", help="numerical verification suites")
    v.add_argument("--suite", required=True, choices=SUITES)
    v.add_argument("--run", help="run directory (required for the theorem suite)")
    v.add_argument("--cases", type=int, help="number of random cases (suite default when omitted)")
    v.add_argument("--seed", type=int, default=0, help="seed for the random suites")

    a = sub.add_parser("activations", help="dump hidden activations of the final model")
    a.add_argument("--run", required=True, help="run directory")
    a.add_argument("--layer", type=int, default=1, help="hidden layer, 1-based (default 1)")
    a.add_argument("--tasks", type=_seed_list, required=True, help="comma-separated 1-based task indices")
    a.add_argument("--seed", type=int, help="which seed directory (default: first)")
    return p


# -- commands -----------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    gen = cfg.gen
    if args.seed is not None:
        gen.seed = args.seed
    bundle = generate_stream(gen)
    io.write_dataset(bundle, args.out, binary_features=args.binary_features)
    print(f"wrote {bundle.meta['num_nodes']} nodes, {len(bundle.events)} events, T={gen.T} to {args.out}")
    return EXIT_OK


def _run_once(method: str, data, cfg: TrainConfig):
    if method == "pi-gnn":
        return continual_run(data, cfg)
    return run_baseline(BaselineMethod(method), data, cfg)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    method = args.method or cfg.method
    seeds = args.seeds if args.seeds is not None else cfg.seeds
    if not seeds:
        raise UsageError("no seeds given")
    data = io.read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "method": method,
        "seeds": seeds,
        "data": os.path.relpath(Path(args.data).resolve(), out.resolve()),
        "train": cfg.train.to_dict(),
    }
    io.write_json(resolved, out / "config.resolved.json")
    for seed in seeds:
        run_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
        run = _run_once(method, data, run_cfg)
        io.save_run(run, out / f"seed-{seed}", checkpoints=not args.no_checkpoints)
        f = fm(run.accuracy_matrix)
        print(f"{method} seed {seed}: PM {pm(run.accuracy_matrix):.4f} FM {'n/a' if f is None else f'{f:.4f}'}")
    agg = io.write_aggregate(out)
    print(_fmt_agg(agg))
    return EXIT_OK


def _fmt_agg(agg: dict) -> str:
    def pct(m, s):
        return "n/a" if m is None else f"{m:.4f} ± {s:.4f}"

    return f"{agg['method']} over {len(agg['seeds'])} seeds: PM {pct(agg['PM_mean'], agg['PM_std'])} " \
           f"FM {pct(agg['FM_mean'], agg['FM_std'])}"


def _load_resolved(run_dir: Path) -> dict:
    try:
        return json.loads((run_dir / "config.resolved.json").read_text())
    except FileNotFoundError:
        raise UsageError(f"{run_dir} is not a run directory (config.resolved.json missing)") from None


def _run_data(run_dir: Path, resolved: dict):
    return io.read_dataset((run_dir / resolved["data"]).resolve())


def _seed_dirs(run_dir: Path) -> list[Path]:
    dirs = sorted(run_dir.glob("seed-*"), key=lambda p: int(p.name.split("-", 1)[1]))
    if not dirs:
        raise UsageError(f"{run_dir} holds no seed-* directories")
    return dirs


def cmd_distill(args) -> int:
    run_dir = Path(args.run)
    resolved = _load_resolved(run_dir)
    if resolved["method"] != "pi-gnn":
        raise UsageError("distill needs a pi-gnn run")
    if args.hidden < 1:
        raise UsageError("--hidden must be >= 1")
    data = _run_data(run_dir, resolved)
    for seed_dir in _seed_dirs(run_dir):
        run = io.load_run(seed_dir, data)
        cfg = TrainConfig.from_dict(run.config)
        if data.T >= 2 and data.T not in run.checkpoints:
            raise UsageError(f"{seed_dir}: checkpoints missing; retrain without --no-checkpoints")
        student, matrix = distill_run(run, cfg, args.hidden, args.epochs)
        out = seed_dir / "distilled"
        out.mkdir(exist_ok=True)
        io.write_matrix_csv(matrix, out / "matrix.csv")
        save_model(student, out / "model.json")
        summary = {
            "method": "pi-gnn-distilled", "seed": run.seed, "T": data.T, "PM": pm(matrix), "FM": fm(matrix),
            "teacher_PM": pm(run.accuracy_matrix), "student_hidden": args.hidden,
            "num_params": student.num_params(), "teacher_num_params": run.final_model.num_params(),
        }
        io.write_json(summary, out / "summary.json")
        print(f"seed {run.seed}: teacher PM {summary['teacher_PM']:.4f} ({summary['teacher_num_params']} params) "
              f"-> student PM {summary['PM']:.4f} ({summary['num_params']} params)")
    return EXIT_OK


def eval_table(run_dir) -> str:
    """PM/FM per seed, mean ± sample std, and the distilled variant when present."""
    run_dir = Path(run_dir)
    resolved = _load_resolved(run_dir)
    lines = [f"method: {resolved['method']}", f"{'variant':<10} {'seed':>6} {'PM':>9} {'FM':>9}"]
    for variant, sub in (("full", ""), ("distilled", "distilled")):
        pms, fms = [], []
        for seed_dir in _seed_dirs(run_dir):
            path = seed_dir / sub / "matrix.csv"
            if not path.exists():
                continue
            m = io.read_matrix_csv(path)
            p, f = pm(m), fm(m)
            pms.append(p)
            if f is not None:
                fms.append(f)
            seed = seed_dir.name.split("-", 1)[1]
            lines.append(f"{variant:<10} {seed:>6} {p:>9.4f} {('n/a' if f is None else f'{f:.4f}'):>9}")
        if len(pms) > 1:
            sd = lambda x: float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
            fm_txt = f"{np.mean(fms):.4f}±{sd(fms):.4f}" if fms else "n/a"
            lines.append(f"{variant:<10} {'mean':>6} {np.mean(pms):.4f}±{sd(pms):.4f} {fm_txt}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    print(eval_table(args.run))
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    if args.suite == "lemma":
        r = verify.lemma_suite(args.cases or 10_000, args.seed)
        print(json.dumps(r, indent=2))
        if not r["equality_holds"]:
            print("note: the z1 == z2 case is reported as stated and is not used for the exit status; "
                  "2L(2z) equals 2L(z) only for logits that are constant within each node", file=sys.stderr)
        return EXIT_OK if r["inequality_holds"] else EXIT_VERIFY
    if args.suite == "decompose":
        r = verify.decompose_suite(args.cases or 1000, args.seed)
        print(json.dumps(r, indent=2))
        return EXIT_OK if r["ok"] else EXIT_VERIFY
    if args.suite == "gradcheck":
        r = verify.gradcheck_suite(args.cases or 20, args.seed)
        print(json.dumps({k: v for k, v in r.items() if k != "details"}, indent=2))
        return EXIT_OK if r["ok"] else EXIT_VERIFY
    # theorem
    if not args.run:
        raise UsageError("--suite theorem needs --run")
    run_dir = Path(args.run)
    resolved = _load_resolved(run_dir)
    if resolved["method"] != "pi-gnn":
        raise UsageError("the theorem suite needs a pi-gnn run")
    data = _run_data(run_dir, resolved)
    ok = True
    for seed_dir in _seed_dirs(run_dir):
        run = io.load_run(seed_dir, data)
        reports = verify.verify_theorem(run)
        drift = [abs(r.lhs - r.recorded_lhs) for r in reports if r.recorded_lhs is not None]
        seed_ok = all(r.ok for r in reports) and all(x <= 1e-9 for x in drift)
        ok &= seed_ok
        io.write_json({"seed": run.seed, "ok": seed_ok, "snapshots": [r.to_dict() for r in reports]},
                      seed_dir / "bound_report.json")
        for r in reports:
            print(f"seed {run.seed} t={r.t}: gap {r.gap:.6g} preconditions_met {r.preconditions_met:.3f} "
                  f"residual {r.residual:.6g} {'ok' if r.ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_activations(args) -> int:
    from .verify import dump_activations

    run_dir = Path(args.run)
    resolved = _load_resolved(run_dir)
    data = _run_data(run_dir, resolved)
    dirs = _seed_dirs(run_dir)
    if args.seed is not None:
        dirs = [d for d in dirs if d.name == f"seed-{args.seed}"]
        if not dirs:
            raise UsageError(f"no seed-{args.seed} directory in {run_dir}")
    seed_dir = dirs[0]
    run = io.load_run(seed_dir, data)
    model = run.final_model
    if not 1 <= args.layer <= model.depth:
        raise UsageError(f"--layer must be in [1, {model.depth}]")
    s = data.snapshots[-1]
    nodes, tasks = [], []
    for task in args.tasks:
        if not 1 <= task <= data.T:
            raise UsageError(f"task {task} outside [1, {data.T}]")
        chosen = data.task_nodes(task, data.T, TEST)
        nodes.extend(int(v) for v in chosen)
        tasks.extend([task] * len(chosen))
    order = np.argsort(nodes, kind="stable")
    dump = dump_activations(model, s, nodes, args.layer)
    task_of = np.array(tasks)[order]
    io.write_activations(dump.values, seed_dir / "activations.csv", nodes=dump.nodes, boundaries=dump.boundaries,
                         tasks=task_of)
    for task in args.tasks:
        sel = task_of == task
        b = dump.boundaries
        means = [dump.values[sel, b[i]:b[i + 1]].mean() if sel.any() else float("nan") for i in range(len(b) - 1)]
        print(f"task {task}: mean activation per block " + " ".join(f"{x:.4f}" for x in means))
    print(f"wrote {seed_dir / 'activations.csv'}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "distill": cmd_distill, "eval": cmd_eval,
    "verify": cmd_verify, "activations": cmd_activations,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (PignnError, ValueError, OSError) as exc:
        print(f"pignn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
