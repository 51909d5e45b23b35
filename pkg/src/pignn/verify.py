"""Numerical checks: the logit-sum lemma, the retraining-loss bound, loss
partition identities, gradient checks, decomposition oracle, activation dumps."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .errors import DimensionMismatch, MissingCheckpoints
from .graph import NewNode, Snapshot, SnapshotDelta, decompose
from .nn import (Adam, ExpandableGNN, LossTerm, backward, expand, forward, freeze_stable, hidden, init_model,
                 objective, per_node_ce)

# -- lemma ----------------------------------------------------------------------


@dataclass
class LemmaReport:
    lhs: np.ndarray  # per node, 2 L(z1 + z2)
    rhs: np.ndarray  # per node, L(z1) + L(z2)
    premise: np.ndarray  # both logit sets classify the node correctly
    tol: float = 1e-12

    @property
    def margin(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def violated(self) -> np.ndarray:
        return self.lhs > self.rhs + self.tol

    @property
    def holds(self) -> bool:
        """Inequality on every node that satisfies the premise."""
        return not bool(np.any(self.violated & self.premise))

    @property
    def precondition_violated(self) -> np.ndarray:
        # informational: failures outside the premise are expected, not errors
        return self.violated & ~self.premise

    def summary(self) -> dict:
        return {
            "nodes": int(len(self.lhs)),
            "premise_nodes": int(self.premise.sum()),
            "holds": self.holds,
            "premise_violations": int((self.violated & self.premise).sum()),
            "unconditional_violations": int(self.precondition_violated.sum()),
            "lhs": float(self.lhs.sum()),
            "rhs": float(self.rhs.sum()),
        }


def verify_lemma(z1, z2, labels, tol: float = 1e-12) -> LemmaReport:
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z1.shape != z2.shape or len(labels) != len(z1):
        raise DimensionMismatch(f"shapes {z1.shape}, {z2.shape} and {labels.shape} do not align")
    lhs = 2.0 * per_node_ce(z1 + z2, labels)
    rhs = per_node_ce(z1, labels) + per_node_ce(z2, labels)
    premise = (np.argmax(z1, 1) == labels) & (np.argmax(z2, 1) == labels)
    return LemmaReport(lhs, rhs, premise, tol)


def _correct_pair(rng: np.random.Generator, c: int, scale: float):
    # rejection sampling: both logit vectors must put their maximum on the label
    while True:
        z1 = rng.normal(scale=scale, size=c)
        z2 = rng.normal(scale=scale, size=c)
        y = int(np.argmax(z1))
        if int(np.argmax(z2)) == y:
            return z1, z2, y


def lemma_suite(n: int = 10_000, seed: int = 0, max_classes: int = 10, tol: float = 1e-12) -> dict:
    """Random premise-satisfying pairs plus the z1 == z2 equality cases.

    The equality check is reported as stated: |2L(2z) - 2L(z)| <= tol.
    """
    rng = np.random.default_rng(seed)
    z1s, z2s, ys = [], [], []
    for _ in range(n):
        c = int(rng.integers(2, max_classes + 1))
        a, b, y = _correct_pair(rng, c, float(rng.choice([0.5, 2.0, 8.0])))
        pad = max_classes - c
        # padding with -inf-like logits keeps per-node class counts varied in one array
        z1s.append(np.concatenate([a, np.full(pad, -1e3)]))
        z2s.append(np.concatenate([b, np.full(pad, -1e3)]))
        ys.append(y)
    rep = verify_lemma(np.array(z1s), np.array(z2s), np.array(ys), tol)

    eq_z = np.array(z1s[: max(1, n // 10)])
    eq_y = np.array(ys[: len(eq_z)])
    eq = verify_lemma(eq_z, eq_z, eq_y, tol)
    eq_err = np.abs(eq.lhs - eq.rhs)
    return {
        "cases": n,
        "inequality_holds": rep.holds,
        "inequality_failures": int((rep.violated & rep.premise).sum()),
        "min_margin": float(rep.margin.min()),
        "equality_cases": int(len(eq_z)),
        "equality_max_abs_diff": float(eq_err.max()),
        "equality_holds": bool(eq_err.max() <= tol),
    }


# -- bound --------------------------------------------------------------------------


@dataclass
class BoundReport:
    t: int
    lhs: float
    rhs_terms: list
    gap: float
    preconditions_met: float
    residual: float
    conditional_gap: float  # summed per-node gap over premise-satisfying stable nodes
    conditional_min: float  # smallest per-node gap among them (inf when none)
    n_changed: int
    n_stable: int
    recorded_lhs: float | None = None
    tol: float = 1e-9

    @property
    def ok(self) -> bool:
        if self.preconditions_met == 1.0 and self.gap < -self.tol:
            return False
        return self.conditional_min >= -self.tol

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


def bound_report(model: ExpandableGNN, s_t: Snapshot, changed, stable, t: int = 0,
                 recorded_lhs: float | None = None, tol: float = 1e-9) -> BoundReport:
    changed = sorted(int(v) for v in changed)
    stable = sorted(int(v) for v in stable)
    lc = forward(model, s_t, changed) if changed else None
    ls = forward(model, s_t, stable) if stable else None
    y_c = s_t.labels[s_t.rows(changed)] if changed else np.zeros(0, dtype=np.int64)
    y_s = s_t.labels[s_t.rows(stable)] if stable else np.zeros(0, dtype=np.int64)
    l_changed = per_node_ce(lc.total, y_c) if lc else np.zeros(0)
    if ls is not None:
        l_tot = per_node_ce(ls.total, y_s)
        l_st = per_node_ce(ls.stable_part, y_s)
        l_new = per_node_ce(ls.new_part, y_s)
        premise = (np.argmax(ls.stable_part, 1) == y_s) & (np.argmax(ls.new_part, 1) == y_s)
        residual = float(np.linalg.norm(ls.new_part - ls.stable_part))
    else:
        l_tot = l_st = l_new = np.zeros(0)
        premise = np.zeros(0, dtype=bool)
        residual = 0.0
    per_node_gap = 0.5 * l_st + 0.5 * l_new - l_tot
    terms = [float(l_changed.sum()), float(0.5 * l_st.sum()), float(0.5 * l_new.sum())]
    lhs = float(l_changed.sum() + l_tot.sum())
    return BoundReport(
        t=t,
        lhs=lhs,
        rhs_terms=terms,
        gap=float(sum(terms) - lhs),
        preconditions_met=float(premise.mean()) if len(premise) else 1.0,
        residual=residual,
        conditional_gap=float(per_node_gap[premise].sum()),
        conditional_min=float(per_node_gap[premise].min()) if premise.any() else float("inf"),
        n_changed=len(changed),
        n_stable=len(stable),
        recorded_lhs=recorded_lhs,
        tol=tol,
    )


def _checkpoint(run, t: int) -> dict:
    ck = run.checkpoints.get(t)
    if not ck or "decomposition" not in ck or "model" not in ck:
        raise MissingCheckpoints(f"run has no PI-GNN checkpoint for snapshot {t}")
    return ck


def _train(s: Snapshot, nodes) -> list[int]:
    from .algo import _train_nodes

    return _train_nodes(s, set(nodes))


def verify_theorem(run, tol: float = 1e-9) -> list[BoundReport]:
    """Recompute both sides of the bound from checkpoints, one report per t >= 2."""
    data = run.data
    if data is None:
        raise MissingCheckpoints("run carries no data")
    recorded = {b["t"]: b for b in run.bound_terms}
    out = []
    for t in range(2, data.T + 1):
        ck = _checkpoint(run, t)
        s_t, d = data.snapshots[t - 1], ck["decomposition"]
        rec = recorded.get(t, {}).get("lhs")
        out.append(bound_report(ck["model"], s_t, _train(s_t, d.changed_centers), _train(s_t, d.stable_centers),
                                t, rec, tol))
    return out


def partition_identities(run) -> list[dict]:
    """Absolute errors of the two loss-partition identities at every t >= 2.

    ``before``: L(G^{t-1}) = L(stable) + L(unstable), previous model on G^{t-1}.
    ``after``: L(G^t) = L(changed on G^t) + L(stable on G^{t-1}), final model.
    """
    data = run.data
    rows = []
    for t in range(2, data.T + 1):
        ck = _checkpoint(run, t)
        s_prev, s_t, d = data.snapshots[t - 2], data.snapshots[t - 1], ck["decomposition"]

        def loss(model, s, nodes):
            nodes = sorted(nodes)
            if not nodes:
                return 0.0
            lp = forward(model, s, nodes)
            return float(per_node_ce(lp.total, s.labels[s.rows(lp.nodes)]).sum())

        prev_all = _train(s_prev, s_prev.nodes.tolist())
        survivors = set(prev_all) - set(d.removed_centers)
        m_prev, m_t = ck["previous"], ck["model"]
        whole_prev = loss(m_prev, s_prev, survivors)
        parts_prev = loss(m_prev, s_prev, _train(s_prev, d.stable_centers)) + loss(
            m_prev, s_prev, _train(s_prev, d.unstable_centers))
        whole_t = loss(m_t, s_t, _train(s_t, s_t.nodes.tolist()))
        parts_t = loss(m_t, s_t, _train(s_t, d.changed_centers)) + loss(m_t, s_prev, _train(s_prev, d.stable_centers))
        rows.append({"t": t, "before": abs(whole_prev - parts_prev), "after": abs(whole_t - parts_t),
                     "loss_before": whole_prev, "loss_after": whole_t})
    return rows


def tightness_curve(run, t: int, milestones=(0, 50, 100), lam_only: bool = True, cfg=None) -> list[float]:
    """Equality residual ||f_new - f_stable|| on stable train nodes after
    isolation training from the expanded checkpoint of snapshot ``t``.

    With ``lam_only`` only the stable-memory (new logits) term is optimised;
    otherwise the full isolation objective is.
    """
    from .algo import _ISOLATE, TrainConfig, _train_nodes, derive_seed

    cfg = cfg or TrainConfig.from_dict(run.config)
    data = run.data
    ck = _checkpoint(run, t)
    if "expanded" not in ck:
        raise MissingCheckpoints(f"no expanded checkpoint at snapshot {t}")
    s_prev, s_t, d = data.snapshots[t - 2], data.snapshots[t - 1], ck["decomposition"]
    s_mem = s_prev if cfg.memory_structure == "old" else s_t
    mem = [v for v in ck["stable_memory"].center_nodes if s_mem.has_node(v)]
    changed = _train_nodes(s_t, d.changed_centers)
    stable = _train_nodes(s_t, d.stable_centers)
    model = ck["expanded"].copy()
    opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)
    out = []
    for epoch in range(max(milestones) + 1):
        if epoch in milestones:
            out.append(bound_report(model, s_t, changed, stable, t).residual)
        if epoch == max(milestones):
            break
        seed = derive_seed(cfg.seed, _ISOLATE, t, epoch)
        terms = [LossTerm(s_mem, mem, "new", cfg.lam, fanout=cfg.fanout, seed=seed)]
        if not lam_only:
            terms.insert(0, LossTerm(s_t, changed, "total", 1.0, fanout=cfg.fanout, seed=seed))
        _, grads = backward(model, terms)
        opt.step(model.params, grads)
    return out


# -- gradients ------------------------------------------------------------------------


def numeric_grad(model: ExpandableGNN, terms, name: str, h: float = 1e-5) -> np.ndarray:
    p = model.params[name]
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + h
        up = objective(model, terms)
        p[idx] = old - h
        down = objective(model, terms)
        p[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def gradcheck(model: ExpandableGNN, terms, h: float = 1e-5) -> dict[str, float]:
    """Relative error ||analytic - numeric|| / max(norms, 1e-8) per trainable block."""
    _, grads = backward(model, terms)
    errs = {}
    for name in model.trainable_names():
        num = numeric_grad(model, terms, name, h)
        ana = grads[name]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8)
        errs[name] = float(np.linalg.norm(ana - num) / denom)
    return errs


def random_snapshot(rng: np.random.Generator, n: int, p: float, d: int = 3, C: int = 3, index: int = 1,
                    id_offset: int = 0) -> Snapshot:
    nodes = np.arange(id_offset, id_offset + n)
    upper = np.triu(rng.random((n, n)) < p, 1)
    edges = [(int(nodes[a]), int(nodes[b])) for a, b in zip(*np.nonzero(upper))]
    return Snapshot.from_edges(index, nodes, rng.normal(size=(n, d)), rng.integers(0, C, n),
                               rng.integers(0, 3, n), edges)


def random_delta(rng: np.random.Generator, s: Snapshot, add_nodes: int = 2, p_add_edge: float = 0.05,
                 p_del_node: float = 0.1, p_del_edge: float = 0.1, C: int = 3) -> SnapshotDelta:
    ids = [int(v) for v in s.nodes]
    start = (max(ids) + 1) if ids else 0
    deleted = [v for v in ids if rng.random() < p_del_node]
    alive = [v for v in ids if v not in set(deleted)]
    new = [NewNode(start + i, tuple(rng.normal(size=s.feature_dim)), int(rng.integers(0, C)),
                   int(rng.integers(0, 3))) for i in range(add_nodes)]
    gone = set(deleted)
    del_edges = [e for e in sorted(s.edge_set()) if e[0] not in gone and e[1] not in gone and rng.random() < p_del_edge]
    existing = s.edge_set()
    pool = alive + [a.id for a in new]
    added = set()
    for a in range(len(pool)):
        for b in range(a + 1, len(pool)):
            e = (min(pool[a], pool[b]), max(pool[a], pool[b]))
            if e not in existing and rng.random() < p_add_edge:
                added.add(e)
    return SnapshotDelta(tuple(new), tuple(deleted), tuple(sorted(added)), tuple(del_edges))


def decompose_oracle(prev: Snapshot, delta: SnapshotDelta, k: int) -> tuple[set, set, set]:
    """Brute force: all-pairs hop distances in G^{t-1} from scipy's csgraph."""
    n = prev.num_nodes
    ids = [int(v) for v in prev.nodes]
    pos = {v: i for i, v in enumerate(ids)}
    rows, cols = [], []
    for u, v in prev.edge_set():
        rows += [pos[u], pos[v]]
        cols += [pos[v], pos[u]]
    dist = shortest_path(csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)), unweighted=True) \
        if n else np.zeros((0, 0))
    deleted = set(delta.deleted_nodes)
    survivors = set(ids) - deleted
    touched = set()
    for u, v in list(delta.added_edges) + list(delta.deleted_edges):
        touched |= {u, v} & survivors
    for v in deleted:
        touched |= {u for u in survivors if (min(u, v), max(u, v)) in prev.edge_set()}
    unstable = {v for v in survivors if any(dist[pos[v], pos[u]] <= k for u in touched)}
    stable = survivors - unstable
    changed = unstable | {a.id for a in delta.added_nodes}
    return unstable, stable, changed


def decompose_suite(n: int = 1000, seed: int = 0, max_nodes: int = 60) -> dict:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        size = int(rng.integers(1, max_nodes + 1))
        s = random_snapshot(rng, size, float(rng.uniform(0.01, 0.2)))
        delta = random_delta(rng, s, add_nodes=int(rng.integers(0, 4)), p_add_edge=float(rng.uniform(0, 0.05)),
                             p_del_node=float(rng.uniform(0, 0.2)), p_del_edge=float(rng.uniform(0, 0.2)))
        k = int(rng.integers(1, 3))
        got = decompose(s, delta, k)
        want = decompose_oracle(s, delta, k)
        if (set(got.unstable_centers), set(got.stable_centers), set(got.changed_centers)) != want:
            mismatches += 1
    return {"cases": n, "mismatches": mismatches, "ok": mismatches == 0}


def _random_model(rng: np.random.Generator, backbone: str, d: int, C: int) -> ExpandableGNN:
    model = init_model(backbone, d, C, int(rng.integers(2, 7)), depth=int(rng.integers(1, 3)),
                       seed=int(rng.integers(1 << 30)), laterals=bool(rng.random() < 0.7))
    for _ in range(int(rng.integers(0, 3))):
        model = expand(model, int(rng.integers(1, 6)), int(rng.integers(1 << 30)))
    # nonzero biases and classifier rows keep ReLUs away from exact kinks
    for name, p in model.params.items():
        if name.endswith("bias") or name.startswith("out."):
            model.params[name] = p + 0.1 * rng.normal(size=p.shape)
    return model


def gradcheck_suite(n: int = 20, seed: int = 0, h: float = 1e-5) -> dict:
    """Random small models and both training objectives of the continual loop."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = []
    for i in range(n):
        backbone = ("sage", "gcn")[i % 2]
        C = int(rng.integers(2, 5))
        s_prev = random_snapshot(rng, int(rng.integers(4, 13)), 0.3, d=3, C=C)
        delta = random_delta(rng, s_prev, add_nodes=int(rng.integers(0, 3)), C=C)
        from .graph import apply_delta

        s_t = apply_delta(s_prev, delta)
        model = _random_model(rng, backbone, 3, C)
        fanout = "all" if rng.random() < 0.5 else int(rng.integers(1, 4))
        seed_i = int(rng.integers(1 << 30))
        pick = lambda s: sorted(int(v) for v in s.nodes if rng.random() < 0.7) or [int(s.nodes[0])]
        if i % 4 < 2:
            # rectification: memory loss minus beta times unstable loss, all parameters free
            model.frozen = frozenset()
            terms = [LossTerm(s_prev, pick(s_prev), "total", 1.0, fanout=fanout, seed=seed_i),
                     LossTerm(s_prev, pick(s_prev), "total", -0.01, fanout=fanout, seed=seed_i)]
            kind = "rectify"
        else:
            # isolation: changed nodes on G^t plus lambda times new logits on G^{t-1}
            model = expand(freeze_stable(model), int(rng.integers(1, 5)), int(rng.integers(1 << 30)))
            name = f"out.b{len(model.blocks) - 1}"
            model.params[name] = 0.1 * rng.normal(size=model.params[name].shape)
            terms = [LossTerm(s_t, pick(s_t), "total", 1.0, fanout=fanout, seed=seed_i),
                     LossTerm(s_prev, pick(s_prev), "new", 0.1, fanout=fanout, seed=seed_i)]
            kind = "isolate"
        errs = gradcheck(model, terms, h)
        m = max(errs.values()) if errs else 0.0
        worst = max(worst, m)
        cases.append({"backbone": backbone, "objective": kind, "max_rel_error": m, "blocks": len(errs)})
    return {"cases": n, "max_rel_error": worst, "ok": worst < 1e-4, "details": cases}


# -- activations ----------------------------------------------------------------------


@dataclass
class ActivationDump:
    values: np.ndarray  # (nodes, width), blocks in order
    nodes: np.ndarray
    boundaries: list[int] = field(default_factory=list)  # column offsets, first 0, last = width
    layer: int = 1

    def block_means(self) -> np.ndarray:
        """Mean activation per unit of each block, averaged over nodes."""
        b = self.boundaries
        return np.array([self.values[:, b[i]:b[i + 1]].mean() if b[i + 1] > b[i] else 0.0
                         for i in range(len(b) - 1)])


def dump_activations(model: ExpandableGNN, s: Snapshot, nodes, layer: int) -> ActivationDump:
    if not 1 <= layer <= model.depth:
        raise ValueError(f"layer {layer} out of range [1, {model.depth}]")
    nodes = np.asarray(sorted(int(v) for v in nodes), dtype=np.int64)
    acts = hidden(model, s, nodes, layer)
    return ActivationDump(acts, nodes, [0] + model.hidden_width_history, layer)
