"""The continual loop: initial training, knowledge rectification, parameter
isolation, and teacher-student distillation."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigInvalid, EmptyMemory, NotExpanded
from .graph import TEST, TRAIN, Decomposition, DynamicGraph, MemoryBuffer, Snapshot, decompose, sample_memory, stable_memory_subset
from .metrics import AccuracyMatrix, accuracy
from .nn import Adam, ExpandableGNN, LossTerm, backward, expand, forward, freeze_stable, init_model, loss_ce, softmax, unfreeze

log = logging.getLogger(__name__)

# stage tags mixed into derived seeds
_INIT, _RECTIFY, _ISOLATE, _EXPAND, _MEMORY, _DISTILL, _RETRAIN, _ONLINE = range(8)


EVAL_PROTOCOLS = ("snapshot", "arrival")


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class TrainConfig:
    beta: float = 0.01
    lam: float = 0.1
    initial_units: int = 12
    expand_units: int = 12
    memory_size: int = 256
    k: int = 2
    epochs_initial: int = 400
    epochs_rectify: int = 10
    epochs_isolate: int = 100
    epochs_distill: int = 400
    distill_hidden: int = 32
    lr: float = 0.001
    weight_decay: float = 0.0
    fanout: object = 10
    backbone: str = "sage"
    laterals: bool = True
    rectify_scope: str = "all"
    memory_structure: str = "old"
    auto_balance: bool = False
    deletion_distill_threshold: float = 0.5
    eval_protocol: str = "snapshot"
    seed: int = 0

    # JSON uses "lambda"; the attribute is ``lam``
    _aliases = {"lambda": "lam"}

    def validate(self) -> None:
        for name in ("initial_units", "expand_units", "memory_size", "k", "epochs_initial",
                     "epochs_rectify", "epochs_isolate", "epochs_distill", "distill_hidden"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be >= 0")
        if self.beta < 0 or self.lam < 0:
            raise ConfigInvalid("beta and lambda must be >= 0")
        if self.initial_units < 1 or self.k < 1:
            raise ConfigInvalid("initial_units and k must be >= 1")
        if self.rectify_scope not in ("all", "newest"):
            raise ConfigInvalid(f"rectify_scope must be 'all' or 'newest', not {self.rectify_scope!r}")
        if self.memory_structure not in ("old", "new"):
            raise ConfigInvalid(f"memory_structure must be 'old' or 'new', not {self.memory_structure!r}")
        if self.eval_protocol not in EVAL_PROTOCOLS:
            raise ConfigInvalid(f"eval_protocol must be one of {EVAL_PROTOCOLS}, not {self.eval_protocol!r}")
        if self.backbone not in ("sage", "gcn"):
            raise ConfigInvalid(f"unknown backbone {self.backbone!r}")
        fo = self.fanout
        if not (fo == "all" or (isinstance(fo, int) and fo >= 1)
                or (isinstance(fo, (list, tuple)) and len(fo) == self.k
                    and all(f == "all" or (isinstance(f, int) and f >= 1) for f in fo))):
            raise ConfigInvalid(f"fanout must be 'all', a positive int, or one entry per layer; got {fo!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        if isinstance(d["fanout"], tuple):
            d["fanout"] = list(d["fanout"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, value in d.items():
            attr = cls._aliases.get(key, key)
            if attr not in names:
                raise ConfigInvalid(f"unknown training config key {key!r}")
            kw[attr] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def final_width(self, T: int) -> int:
        return self.initial_units + self.expand_units * (T - 1)


@dataclass
class RunResult:
    method: str
    seed: int
    accuracy_matrix: AccuracyMatrix
    final_model: ExpandableGNN
    losses: dict = field(default_factory=dict)
    bound_terms: list = field(default_factory=list)
    memory_trace: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    widths: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    data: DynamicGraph | None = None

    @property
    def num_params(self) -> int:
        return self.final_model.num_params()


def _train_nodes(s: Snapshot, nodes=None) -> list[int]:
    train = s.nodes[s.splits == TRAIN]
    if nodes is None:
        return [int(v) for v in train]
    return sorted(int(v) for v in train if int(v) in nodes)


def _optimise(model: ExpandableGNN, make_terms, epochs: int, cfg: TrainConfig, stage: int, t: int,
              history: list | None) -> ExpandableGNN:
    opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(epochs):
        terms = make_terms(derive_seed(cfg.seed, stage, t, epoch))
        value, grads = backward(model, terms)
        opt.step(model.params, grads)
        if history is not None:
            history.append(value)
    return model


def new_model(cfg: TrainConfig, data: DynamicGraph, units: int | None = None, seed_tag=(_INIT, 1)) -> ExpandableGNN:
    return init_model(cfg.backbone, data.feature_dim, data.num_classes,
                      cfg.initial_units if units is None else units, depth=cfg.k,
                      seed=derive_seed(cfg.seed, *seed_tag), laterals=cfg.laterals)


def train_initial(model: ExpandableGNN, g1: Snapshot, cfg: TrainConfig, history: list | None = None,
                  stage: int = _INIT, t: int = 1, epochs: int | None = None) -> ExpandableGNN:
    """Full-batch cross-entropy training on the train split of ``g1``."""
    model = model.copy()
    nodes = _train_nodes(g1)
    epochs = cfg.epochs_initial if epochs is None else epochs
    return _optimise(model, lambda seed: [LossTerm(g1, nodes, "total", 1.0, fanout=cfg.fanout, seed=seed)],
                     epochs, cfg, stage, t, history)


def rectify(model: ExpandableGNN, s_prev: Snapshot, memory: MemoryBuffer, unstable, beta: float, epochs: int,
            cfg: TrainConfig, history: list | None = None, t: int = 0) -> ExpandableGNN:
    """Minimise L(memory) - beta * L(unstable) on G^{t-1} with total logits.

    ``unstable`` should already be restricted to labelled training nodes.
    """
    if not memory.center_nodes:
        raise EmptyMemory("rectification needs at least one memory node")
    if cfg.rectify_scope == "all":
        model = unfreeze(model)
    else:
        newest = len(model.blocks) - 1
        names = [n for n in model.params if f".b{newest}." in n or n == f"out.b{newest}"]
        if newest == 0:
            names.append("out.bias")
        model = freeze_stable(model)
        model = unfreeze(model, names)
    mem = list(memory.center_nodes)
    unstable = sorted(int(v) for v in unstable)

    def terms(seed):
        return [
            LossTerm(s_prev, mem, "total", 1.0, fanout=cfg.fanout, seed=seed),
            LossTerm(s_prev, unstable, "total", -beta, fanout=cfg.fanout, seed=seed),
        ]

    return _optimise(model, terms, epochs, cfg, _RECTIFY, t, history)


def isolate_train(model: ExpandableGNN, s_t: Snapshot, changed, s_mem: Snapshot, stable_memory: MemoryBuffer,
                  lam: float, epochs: int, cfg: TrainConfig, history: list | None = None, t: int = 0) -> ExpandableGNN:
    """Minimise L(total on changed, G^t) + lam * L(new_part on stable memory).

    Only unfrozen (newly expanded) parameters move.
    """
    if not model.trainable_names():
        raise NotExpanded("no trainable parameters; call expand() first")
    model = model.copy()
    changed = sorted(int(v) for v in changed)
    mem = [v for v in stable_memory.center_nodes if s_mem.has_node(v)]

    def terms(seed):
        return [
            LossTerm(s_t, changed, "total", 1.0, fanout=cfg.fanout, seed=seed),
            LossTerm(s_mem, mem, "new", lam, fanout=cfg.fanout, seed=seed),
        ]

    return _optimise(model, terms, epochs, cfg, _ISOLATE, t, history)


def task_eval_set(data: DynamicGraph, i: int, t: int, protocol: str = "snapshot") -> tuple[Snapshot, np.ndarray]:
    """Graph and test nodes that define task ``i`` when evaluated after training on task ``t``.

    "snapshot": every test node of G^i, on G^i itself, so a_ti depends only on the model.
    "arrival": test nodes that first appeared at snapshot i and survive to t, on G^t.
    """
    if protocol == "snapshot":
        s = data.snapshots[i - 1]
        return s, s.nodes_in_split(TEST)
    if protocol == "arrival":
        return data.snapshots[t - 1], data.task_nodes(i, t)
    raise ConfigInvalid(f"unknown eval_protocol {protocol!r}")


def evaluate_row(model: ExpandableGNN, data: DynamicGraph, t: int, matrix: AccuracyMatrix,
                 protocol: str = "snapshot") -> None:
    for i in range(1, t + 1):
        s, nodes = task_eval_set(data, i, t, protocol)
        matrix[t, i] = accuracy(model, s, nodes) if len(nodes) else float("nan")


def bound_terms(model: ExpandableGNN, s_t: Snapshot, d: Decomposition) -> dict:
    """Both sides of the retraining-loss bound on the train split of G^t."""
    changed = _train_nodes(s_t, d.changed_centers)
    stable = _train_nodes(s_t, d.stable_centers)
    everything = sorted(changed + stable)
    lp = forward(model, s_t, everything)
    labels = s_t.labels[s_t.rows(lp.nodes)]
    pos = {v: r for r, v in enumerate(lp.nodes)}
    rc = np.array([pos[v] for v in changed], dtype=np.int64)
    rs = np.array([pos[v] for v in stable], dtype=np.int64)
    terms = [
        loss_ce(lp.total[rc], labels[rc]),
        0.5 * loss_ce(lp.stable_part[rs], labels[rs]),
        0.5 * loss_ce(lp.new_part[rs], labels[rs]),
    ]
    lhs = loss_ce(lp.total, labels)
    ok = (np.argmax(lp.stable_part[rs], 1) == labels[rs]) & (np.argmax(lp.new_part[rs], 1) == labels[rs])
    return {
        "lhs": lhs,
        "rhs_terms": terms,
        "gap": sum(terms) - lhs,
        "preconditions_met": float(ok.mean()) if len(rs) else 1.0,
        "residual": float(np.linalg.norm(lp.new_part[rs] - lp.stable_part[rs])),
        "n_changed": len(changed),
        "n_stable": len(stable),
    }


def _balance(cfg: TrainConfig, s_prev: Snapshot, mem: MemoryBuffer, stable_train: int, stable_mem: MemoryBuffer):
    if not cfg.auto_balance:
        return cfg.beta, cfg.lam
    n_train = max(len(_train_nodes(s_prev)), 1)
    beta = len(mem.center_nodes) / n_train
    lam = 0.5 * stable_train / max(len(stable_mem.center_nodes), 1)
    return beta, lam


def continual_run(data: DynamicGraph, cfg: TrainConfig, keep_checkpoints: bool = True) -> RunResult:
    cfg.validate()
    T = data.T
    matrix = AccuracyMatrix(T)
    losses = {"initial": [], "rectify": {}, "isolate": {}}
    clock = {"initial": 0.0, "rectify": 0.0, "isolate": 0.0, "eval": 0.0}
    result = RunResult("pi-gnn", cfg.seed, matrix, None, losses=losses, wall_clock=clock,
                       config=cfg.to_dict(), data=data)

    tick = time.perf_counter()
    model = train_initial(new_model(cfg, data), data.snapshots[0], cfg, losses["initial"])
    clock["initial"] += time.perf_counter() - tick
    result.widths.append(model.hidden_width)
    if keep_checkpoints:
        result.checkpoints[1] = {"model": model}
    tick = time.perf_counter()
    evaluate_row(model, data, 1, matrix, cfg.eval_protocol)
    clock["eval"] += time.perf_counter() - tick

    for t in range(2, T + 1):
        s_prev, s_t, delta = data.snapshots[t - 2], data.snapshots[t - 1], data.deltas[t - 2]
        d = decompose(s_prev, delta, cfg.k)
        mem = sample_memory(s_prev, cfg.memory_size, derive_seed(cfg.seed, _MEMORY, t), cfg.k,
                            pool=_train_nodes(s_prev))
        stable_mem = stable_memory_subset(mem, d)
        result.memory_trace.append({"t": t, "memory": list(mem.center_nodes), "stable": list(stable_mem.center_nodes)})
        if len(delta.deleted_nodes) > cfg.deletion_distill_threshold * s_prev.num_nodes:
            result.notes.append(f"snapshot {t}: {len(delta.deleted_nodes)} of {s_prev.num_nodes} nodes deleted; "
                                "distillation recommended")
        model_prev = model
        unstable = _train_nodes(s_prev, d.unstable_centers)
        changed = _train_nodes(s_t, d.changed_centers)
        beta, lam = _balance(cfg, s_prev, mem, len(_train_nodes(s_prev, d.stable_centers)), stable_mem)

        tick = time.perf_counter()
        if d.changed_centers:
            model_rect = rectify(model, s_prev, mem, unstable, beta, cfg.epochs_rectify, cfg,
                                 losses["rectify"].setdefault(t, []), t)
        else:
            # nothing changed: the previous model already fits G^{t-1} = G^t_stable
            model_rect = freeze_stable(model)
        clock["rectify"] += time.perf_counter() - tick

        expanded = expand(freeze_stable(model_rect), cfg.expand_units, derive_seed(cfg.seed, _EXPAND, t))
        tick = time.perf_counter()
        s_mem = s_prev if cfg.memory_structure == "old" else s_t
        if d.changed_centers and expanded.trainable_names():
            model = isolate_train(expanded, s_t, changed, s_mem, stable_mem, lam, cfg.epochs_isolate, cfg,
                                  losses["isolate"].setdefault(t, []), t)
        else:
            model = expanded
        clock["isolate"] += time.perf_counter() - tick

        result.bound_terms.append({"t": t, **bound_terms(model, s_t, d)})
        result.widths.append(model.hidden_width)
        if keep_checkpoints:
            result.checkpoints[t] = {
                "previous": model_prev, "rectified": model_rect, "expanded": expanded, "model": model,
                "decomposition": d, "memory": mem, "stable_memory": stable_mem,
            }
        tick = time.perf_counter()
        evaluate_row(model, data, t, matrix, cfg.eval_protocol)
        clock["eval"] += time.perf_counter() - tick
        log.info("t=%d width=%d a_tt=%.3f", t, model.hidden_width, matrix[t, t])

    result.final_model = model
    return result


def distill(teacher: ExpandableGNN, memory: MemoryBuffer, changed, student_hidden: int, epochs: int,
            cfg: TrainConfig, snapshot: Snapshot, history: list | None = None) -> ExpandableGNN:
    """Train a fresh single-block student on the teacher's soft targets (temperature 1)."""
    nodes = sorted({int(v) for v in memory.center_nodes if snapshot.has_node(v)} | {int(v) for v in changed})
    student = init_model(teacher.backbone, teacher.input_dim, teacher.num_classes, student_hidden,
                         depth=teacher.depth, seed=derive_seed(cfg.seed, _DISTILL), laterals=teacher.laterals)
    if not nodes:
        return student
    targets = softmax(forward(teacher, snapshot, nodes).total)
    return _optimise(student, lambda seed: [LossTerm(snapshot, nodes, "total", 1.0, targets=targets,
                                                     fanout=cfg.fanout, seed=seed)],
                     epochs, cfg, _DISTILL, snapshot.index, history)


def distill_run(run: RunResult, cfg: TrainConfig, student_hidden: int | None = None,
                epochs: int | None = None) -> tuple[ExpandableGNN, AccuracyMatrix]:
    """Distil the final model of ``run`` on G^T; returns the student and the
    accuracy matrix with its last row re-evaluated on the student."""
    data = run.data
    T = data.T
    s = data.snapshots[-1]
    if T >= 2:
        ck = run.checkpoints[T]
        mem, changed = ck["memory"], ck["decomposition"].changed_centers
    else:
        mem = sample_memory(s, cfg.memory_size, derive_seed(cfg.seed, _MEMORY, 1), cfg.k, pool=_train_nodes(s))
        changed = ()
    changed = _train_nodes(s, set(changed))
    student = distill(run.final_model, mem, changed, student_hidden or cfg.distill_hidden,
                      cfg.epochs_distill if epochs is None else epochs, cfg, s)
    matrix = run.accuracy_matrix.copy()
    evaluate_row(student, data, T, matrix, cfg.eval_protocol)
    return student, matrix
