"""Block-expandable GNN backbones with hand-written forward/backward and Adam.

Every hidden layer is split into column blocks: block 0 holds the initial
units and each call to :func:`expand` appends one block per hidden layer.
Layer weights are lower block-triangular (block ``j`` reads input blocks
``i <= j``), so older blocks never see activations of newer ones. The linear
classifier is row-partitioned by block and its bias belongs to block 0.

The newest block (present only after at least one expansion) is the "new"
path; everything older is the "stable" path, and logits decompose exactly as
``total = stable_part + new_part``.

Parameter names::

    h{l}.b{j}.in{i}.self | .neigh   sage weights of layer l, output block j, input block i
    h{l}.b{j}.in{i}.lin             gcn weights
    h{l}.b{j}.bias
    out.b{j}, out.bias              classifier

At layer 0 the input index ``i`` is ``x`` (raw features).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, FormatError, VersionMismatch
from .graph import Snapshot, sampled_csr

BACKBONES = ("sage", "gcn")
CHECKPOINT_FORMAT = "pignn-checkpoint"
CHECKPOINT_VERSION = 1


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ExpandableGNN:
    backbone: str
    input_dim: int
    num_classes: int
    depth: int
    blocks: list[int]
    params: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()
    laterals: bool = True

    def copy(self) -> "ExpandableGNN":
        return ExpandableGNN(
            self.backbone, self.input_dim, self.num_classes, self.depth, list(self.blocks),
            {k: v.copy() for k, v in self.params.items()}, frozenset(self.frozen), self.laterals,
        )

    @property
    def hidden_width(self) -> int:
        return int(sum(self.blocks))

    @property
    def hidden_width_history(self) -> list[int]:
        return [int(w) for w in np.cumsum(self.blocks)]

    @property
    def num_expansions(self) -> int:
        return len(self.blocks) - 1

    @property
    def split(self) -> int:
        """Index of the first block on the new path (== len(blocks) when none)."""
        return len(self.blocks) - 1 if len(self.blocks) > 1 else len(self.blocks)

    def block_inputs(self, layer: int, j: int) -> list:
        if layer == 0:
            return ["x"]
        return list(range(j + 1)) if self.laterals else [j]

    def block_param_names(self, layer: int, j: int) -> list[str]:
        kinds = ("self", "neigh") if self.backbone == "sage" else ("lin",)
        names = [f"h{layer}.b{j}.in{i}.{k}" for i in self.block_inputs(layer, j) for k in kinds]
        return names + [f"h{layer}.b{j}.bias"]

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def same_weights(self, other: "ExpandableGNN") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(v, other.params[k]) for k, v in self.params.items()
        )


def _add_block(model: ExpandableGNN, units: int, rng: np.random.Generator, zero_classifier: bool) -> None:
    j = len(model.blocks)
    model.blocks.append(units)
    for layer in range(model.depth):
        for i in model.block_inputs(layer, j):
            fan_in = model.input_dim if i == "x" else model.blocks[i]
            kinds = ("self", "neigh") if model.backbone == "sage" else ("lin",)
            for k in kinds:
                model.params[f"h{layer}.b{j}.in{i}.{k}"] = _glorot(rng, fan_in, units)
        model.params[f"h{layer}.b{j}.bias"] = np.zeros(units)
    if zero_classifier:
        model.params[f"out.b{j}"] = np.zeros((units, model.num_classes))
    else:
        model.params[f"out.b{j}"] = _glorot(rng, units, model.num_classes)


def init_model(backbone: str, input_dim: int, num_classes: int, units: int, depth: int = 2,
               seed: int = 0, laterals: bool = True) -> ExpandableGNN:
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}")
    if units < 1 or depth < 1:
        raise ValueError("units and depth must be >= 1")
    model = ExpandableGNN(backbone, input_dim, num_classes, depth, [], {}, frozenset(), laterals)
    _add_block(model, units, np.random.default_rng(seed), zero_classifier=False)
    model.params["out.bias"] = np.zeros(num_classes)
    return model


def expand(model: ExpandableGNN, units: int, seed: int) -> ExpandableGNN:
    """Append ``units`` new units to every hidden layer.

    Existing parameters become frozen; the new classifier rows start at zero
    so the total logits are unchanged.
    """
    if units < 0:
        raise ValueError("units must be >= 0")
    out = model.copy()
    if units == 0:
        return out
    out.frozen = frozenset(out.params)
    _add_block(out, units, np.random.default_rng(seed), zero_classifier=True)
    return out


def freeze_stable(model: ExpandableGNN) -> ExpandableGNN:
    out = model.copy()
    out.frozen = frozenset(out.params)
    return out


def unfreeze(model: ExpandableGNN, names=None) -> ExpandableGNN:
    out = model.copy()
    out.frozen = frozenset() if names is None else out.frozen - set(names)
    return out


# -- forward ------------------------------------------------------------------

@dataclass
class LogitPair:
    nodes: np.ndarray
    total: np.ndarray
    stable_part: np.ndarray
    new_part: np.ndarray

    def select(self, selector: str) -> np.ndarray:
        return {"total": self.total, "stable": self.stable_part, "new": self.new_part}[selector]


def _fanout_for(fanout, layer: int):
    if fanout == "all" or isinstance(fanout, (int, np.integer)):
        return fanout
    return fanout[layer]


def aggregation_operator(backbone: str, s: Snapshot, fanout, seed: int, layer: int) -> sp.csr_matrix:
    indptr, cols = sampled_csr(s, _fanout_for(fanout, layer), seed, layer)
    n = s.num_nodes
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n), counts)
    if backbone == "sage":
        vals = 1.0 / counts[rows] if len(rows) else np.zeros(0)
        return sp.csr_matrix((vals, cols, indptr), shape=(n, n))
    deg = counts + 1.0
    norm = 1.0 / np.sqrt(deg)
    a = sp.csr_matrix((norm[rows] * norm[cols], cols, indptr), shape=(n, n))
    return (a + sp.diags(1.0 / deg)).tocsr()


@dataclass
class _Cache:
    ops: list
    inputs: list = field(default_factory=list)
    aggs: list = field(default_factory=list)
    pres: list = field(default_factory=list)
    top: list = field(default_factory=list)


def _propagate(model: ExpandableGNN, s: Snapshot, fanout, seed: int) -> _Cache:
    if s.feature_dim != model.input_dim:
        raise DimensionMismatch(f"model expects {model.input_dim} features, snapshot has {s.feature_dim}")
    cache = _Cache([aggregation_operator(model.backbone, s, fanout, seed, l) for l in range(model.depth)])
    h = {"x": s.features}
    p = model.params
    for layer in range(model.depth):
        a = cache.ops[layer]
        agg = {i: a @ x for i, x in h.items()}
        pres = []
        for j in range(len(model.blocks)):
            acc = None
            for i in model.block_inputs(layer, j):
                pre = f"h{layer}.b{j}.in{i}"
                if model.backbone == "sage":
                    term = h[i] @ p[pre + ".self"] + agg[i] @ p[pre + ".neigh"]
                else:
                    term = agg[i] @ p[pre + ".lin"]
                acc = term if acc is None else acc + term
            pres.append(acc + p[f"h{layer}.b{j}.bias"])
        cache.inputs.append(h)
        cache.aggs.append(agg)
        cache.pres.append(pres)
        h = {j: np.maximum(z, 0.0) for j, z in enumerate(pres)}
    cache.top = [h[j] for j in range(len(model.blocks))]
    return cache


def _logits(model: ExpandableGNN, top: list, rows: np.ndarray, nodes: np.ndarray) -> LogitPair:
    p = model.params
    stable = np.broadcast_to(p["out.bias"], (len(rows), model.num_classes)).copy()
    new = np.zeros((len(rows), model.num_classes))
    for j in range(len(model.blocks)):
        contrib = top[j][rows] @ p[f"out.b{j}"]
        if j < model.split:
            stable = stable + contrib
        else:
            new = new + contrib
    return LogitPair(nodes, stable + new, stable, new)


def forward(model: ExpandableGNN, s: Snapshot, batch=None, fanout="all", seed: int = 0) -> LogitPair:
    nodes = s.nodes if batch is None else np.asarray(sorted(int(v) for v in batch), dtype=np.int64)
    rows = s.rows(nodes)
    cache = _propagate(model, s, fanout, seed)
    return _logits(model, cache.top, rows, nodes)


def hidden(model: ExpandableGNN, s: Snapshot, nodes, layer: int, fanout="all", seed: int = 0) -> np.ndarray:
    """Post-ReLU activations of hidden layer ``layer`` (1-based), blocks in order."""
    if not 1 <= layer <= model.depth:
        raise ValueError(f"layer must be in [1, {model.depth}]")
    rows = s.rows(nodes)
    cache = _propagate(model, s, fanout, seed)
    if layer == model.depth:
        blocks = cache.top
    else:
        blocks = [cache.inputs[layer][j] for j in range(len(model.blocks))]
    return np.hstack([b[rows] for b in blocks])


# -- losses -------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def loss_ce(logits, labels) -> float:
    """Summed softmax cross-entropy; zero for an empty set."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim == 1:
        logits = logits.reshape(len(labels), -1) if len(labels) else logits.reshape(0, 0)
    if len(labels) != len(logits):
        raise DimensionMismatch("logits and labels differ in length")
    if len(labels) == 0:
        return 0.0
    c = logits.shape[1]
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    return float(-_log_softmax(logits)[np.arange(len(labels)), labels].sum())


def per_node_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if len(labels) == 0:
        return np.zeros(0)
    return -_log_softmax(logits)[np.arange(len(labels)), labels]


def soft_ce(logits: np.ndarray, targets: np.ndarray) -> float:
    """Summed cross-entropy of softmax(logits) against target distributions."""
    if len(targets) == 0:
        return 0.0
    return float(-(targets * _log_softmax(logits)).sum())


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LossTerm:
    """``coef * CE(selector logits on nodes)`` evaluated on ``snapshot``.

    With ``targets`` set, cross-entropy is taken against those soft targets
    instead of the snapshot labels.
    """

    snapshot: Snapshot
    nodes: Sequence[int]
    selector: str = "total"
    coef: float = 1.0
    targets: np.ndarray | None = None
    fanout: object = "all"
    seed: int = 0


def _term_loss_and_grad(lp: LogitPair, term: LossTerm):
    z = lp.select(term.selector)
    if term.targets is not None:
        q = softmax(z)
        loss = soft_ce(z, term.targets)
        dz = q * term.targets.sum(axis=1, keepdims=True) - term.targets
    else:
        labels = term.snapshot.labels[term.snapshot.rows(lp.nodes)]
        loss = loss_ce(z, labels)
        dz = softmax(z)
        dz[np.arange(len(labels)), labels] -= 1.0
    return loss, dz


def objective(model: ExpandableGNN, terms: Sequence[LossTerm]) -> float:
    total = 0.0
    for term in terms:
        if term.coef == 0 or len(term.nodes) == 0:
            continue
        lp = forward(model, term.snapshot, term.nodes, term.fanout, term.seed)
        total += term.coef * _term_loss_and_grad(lp, term)[0]
    return total


def _reach(model: ExpandableGNN, trainable: set) -> list[dict]:
    """reach[l][i]: does hidden block i feeding layer l depend on a trainable parameter?"""
    reach = [{"x": False}]
    for layer in range(model.depth):
        cur = {}
        for j in range(len(model.blocks)):
            own = any(n in trainable for n in model.block_param_names(layer, j))
            cur[j] = own or any(reach[layer].get(i, False) for i in model.block_inputs(layer, j))
        reach.append(cur)
    return reach


def backward(model: ExpandableGNN, terms: Sequence[LossTerm]) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradient of ``sum(term.coef * CE(term))`` over trainable parameters.

    The returned dict has one entry per trainable parameter and none for
    frozen ones.
    """
    p = model.params
    trainable = set(model.trainable_names())
    grads = {n: np.zeros_like(p[n]) for n in model.params if n in trainable}
    if not trainable:
        return objective(model, terms), grads
    reach = _reach(model, trainable)
    total = 0.0
    nb = len(model.blocks)
    for term in terms:
        if term.coef == 0 or len(term.nodes) == 0:
            continue
        s = term.snapshot
        nodes = np.asarray(sorted(int(v) for v in term.nodes), dtype=np.int64)
        rows = s.rows(nodes)
        cache = _propagate(model, s, term.fanout, term.seed)
        lp = _logits(model, cache.top, rows, nodes)
        loss, dz = _term_loss_and_grad(lp, term)
        total += term.coef * loss
        dz = term.coef * dz
        if term.selector in ("total", "stable") and "out.bias" in trainable:
            grads["out.bias"] += dz.sum(axis=0)
        dh = [None] * nb
        for j in range(nb):
            on_new = j >= model.split
            if (term.selector == "new" and not on_new) or (term.selector == "stable" and on_new):
                continue
            name = f"out.b{j}"
            if name in trainable:
                grads[name] += cache.top[j][rows].T @ dz
            if reach[model.depth][j]:
                d = np.zeros_like(cache.top[j])
                d[rows] = dz @ p[name].T
                dh[j] = d
        for layer in reversed(range(model.depth)):
            h_in, agg, pres = cache.inputs[layer], cache.aggs[layer], cache.pres[layer]
            d_in, d_agg = {}, {}
            for j in range(nb):
                if dh[j] is None:
                    continue
                dpre = dh[j] * (pres[j] > 0)
                bname = f"h{layer}.b{j}.bias"
                if bname in trainable:
                    grads[bname] += dpre.sum(axis=0)
                for i in model.block_inputs(layer, j):
                    pre = f"h{layer}.b{j}.in{i}"
                    prop = reach[layer].get(i, False)
                    if model.backbone == "sage":
                        for kind, src in (("self", h_in[i]), ("neigh", agg[i])):
                            if pre + "." + kind in trainable:
                                grads[pre + "." + kind] += src.T @ dpre
                        if prop:
                            d_in[i] = d_in.get(i, 0.0) + dpre @ p[pre + ".self"].T
                            d_agg[i] = d_agg.get(i, 0.0) + dpre @ p[pre + ".neigh"].T
                    else:
                        if pre + ".lin" in trainable:
                            grads[pre + ".lin"] += agg[i].T @ dpre
                        if prop:
                            d_agg[i] = d_agg.get(i, 0.0) + dpre @ p[pre + ".lin"].T
            if layer == 0:
                break
            a_t = cache.ops[layer].T
            dh = [None] * nb
            for i in range(nb):
                if i in d_in or i in d_agg:
                    d = d_in.get(i, 0.0)
                    if i in d_agg:
                        d = d + a_t @ d_agg[i]
                    dh[i] = np.asarray(d)
    return total, grads


# -- optimiser ----------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def moment(self, name: str, shape=()) -> tuple[np.ndarray, np.ndarray]:
        return self.m.get(name, np.zeros(shape)), self.v.get(name, np.zeros(shape))

    def step(self, params: dict, grads: dict) -> dict:
        """One Adam update of ``params`` (in place) for the names in ``grads``."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(state: Adam, model: ExpandableGNN, grads: dict) -> ExpandableGNN:
    trainable = set(model.trainable_names())
    state.step(model.params, {n: g for n, g in grads.items() if n in trainable})
    return model


# -- checkpoints --------------------------------------------------------------

def model_to_dict(model: ExpandableGNN) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone": model.backbone,
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "depth": model.depth,
        "laterals": model.laterals,
        "blocks": list(model.blocks),
        "frozen": sorted(model.frozen),
        "params": {
            name: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for name, v in model.params.items()
        },
    }


def model_from_dict(d: dict) -> ExpandableGNN:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {d.get('version')} != {CHECKPOINT_VERSION}")
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in d["params"].items()
    }
    return ExpandableGNN(d["backbone"], d["input_dim"], d["num_classes"], d["depth"], list(d["blocks"]),
                         params, frozenset(d["frozen"]), d["laterals"])


def save_model(model: ExpandableGNN, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> ExpandableGNN:
    try:
        return model_from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc

