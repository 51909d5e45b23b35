"""Retrain / Pretrain / OnlineGNN reference strategies."""
from __future__ import annotations

import time
from dataclasses import dataclass

from .algo import _ONLINE, _RETRAIN, RunResult, TrainConfig, _optimise, _train_nodes, evaluate_row, new_model, train_initial
from .graph import decompose
from .metrics import AccuracyMatrix
from .nn import LossTerm

KINDS = ("retrain", "pretrain", "online")


@dataclass
class BaselineMethod:
    kind: str
    capacity: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}; expected one of {KINDS}")


def run_baseline(method: BaselineMethod, data, cfg: TrainConfig) -> RunResult:
    """All baselines share PI-GNN's backbone, epochs, optimiser and evaluator.

    Capacity defaults to PI-GNN's final (pre-distillation) hidden width.
    """
    cfg.validate()
    T = data.T
    width = method.capacity or cfg.final_width(T)
    matrix = AccuracyMatrix(T)
    result = RunResult(method.kind, cfg.seed, matrix, None, losses={}, config=cfg.to_dict(), data=data)
    tick = time.perf_counter()
    model = None
    for t in range(1, T + 1):
        s = data.snapshots[t - 1]
        history = result.losses.setdefault(t, [])
        if t == 1:
            model = train_initial(new_model(cfg, data, width), s, cfg, history)
        elif method.kind == "retrain":
            model = train_initial(new_model(cfg, data, width, seed_tag=(_RETRAIN, t)), s, cfg, history,
                                  stage=_RETRAIN, t=t)
        elif method.kind == "online":
            d = decompose(data.snapshots[t - 2], data.deltas[t - 2], cfg.k)
            changed = _train_nodes(s, d.changed_centers)
            model = model.copy()
            model = _optimise(model, lambda seed: [LossTerm(s, changed, "total", 1.0, fanout=cfg.fanout, seed=seed)],
                              cfg.epochs_isolate, cfg, _ONLINE, t, history)
        evaluate_row(model, data, t, matrix, cfg.eval_protocol)
        result.widths.append(model.hidden_width)
        result.checkpoints[t] = {"model": model}
    result.wall_clock["total"] = time.perf_counter() - tick
    result.final_model = model
    return result



