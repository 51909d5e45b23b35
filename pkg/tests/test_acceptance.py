"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line
in the terminal summary ("acceptance criteria" section)."""
import time

import numpy as np
import pytest

from oracles import decompose_bfs, fm_ref, pm_ref
from pignn.algo import TrainConfig, continual_run, distill_run
from pignn.baselines import BaselineMethod, run_baseline
from pignn.datagen import GenConfig, bundle_to_graph, generate_stream
from pignn.graph import TEST, NewNode, SnapshotDelta, decompose
from pignn.metrics import AccuracyMatrix, fm, pm
from pignn.nn import expand, forward, init_model
from pignn.verify import (dump_activations, gradcheck_suite, lemma_suite, partition_identities, random_snapshot,
                          tightness_curve, verify_theorem)

SEEDS = (0, 1, 2)
criterion = pytest.mark.criterion


def mean_metric(runs, kind, metric):
    return float(np.mean([metric(runs[(kind, s)].accuracy_matrix) for s in SEEDS]))


@criterion(1, "analytic gradients match central differences")
def test_gradients(record_detail):
    tick = time.perf_counter()
    r = gradcheck_suite(20, seed=0, h=1e-5)
    elapsed = time.perf_counter() - tick
    backbones = {c["backbone"] for c in r["details"]}
    objectives = {c["objective"] for c in r["details"]}
    record_detail(f"20 models, max rel error {r['max_rel_error']:.2e} (< 1e-4), {elapsed:.1f}s")
    assert backbones == {"sage", "gcn"} and objectives == {"rectify", "isolate"}
    assert r["max_rel_error"] < 1e-4
    assert elapsed < 60


@criterion(2, "logit-sum lemma: inequality under the premise, equality at z1 = z2")
def test_lemma(record_detail):
    r = lemma_suite(10_000, seed=0, tol=1e-12)
    record_detail(f"inequality {r['cases'] - r['inequality_failures']}/{r['cases']} hold; "
                  f"z1 = z2 max |lhs - rhs| {r['equality_max_abs_diff']:.3g} over {r['equality_cases']} cases (tol 1e-12)")
    assert r["inequality_holds"] and r["inequality_failures"] == 0
    assert r["equality_max_abs_diff"] <= 1e-12


@criterion(3, "retraining-loss bound and residual tightening")
def test_bound(pi_run, record_detail):
    tick = time.perf_counter()
    reports = verify_theorem(pi_run, tol=1e-9)
    full = [r for r in reports if r.preconditions_met == 1.0]
    curves = {t: tightness_curve(pi_run, t, milestones=(0, 50, 100), lam_only=True) for t in range(2, 7)}
    elapsed = time.perf_counter() - tick
    monotone = {t: all(b < a for a, b in zip(c, c[1:])) for t, c in curves.items()}
    cond = min(r.conditional_min for r in reports)
    record_detail(f"{len(full)}/{len(reports)} snapshots with preconditions_met = 1; min per-node gap on premise "
                  f"nodes {cond:.3g}; residual at t=2 over 0/50/100 epochs "
                  + "/".join(f"{x:.1f}" for x in curves[2]) + f"; monotone at t={[t for t in monotone if monotone[t]]}; "
                  f"{elapsed:.1f}s")
    for r in full:
        assert r.gap >= -1e-9
    assert all(r.ok for r in reports)
    assert all(monotone.values())
    assert elapsed < 300


@criterion(4, "freeze invariance after every isolation stage")
def test_freeze_invariance(pi_run, record_detail):
    data = pi_run.data
    checked = 0
    for t in range(2, data.T + 1):
        ck = pi_run.checkpoints[t]
        s_prev = data.snapshots[t - 2]
        stable = sorted(ck["decomposition"].stable_centers)
        after = forward(ck["model"], s_prev, stable).stable_part
        before = forward(ck["rectified"], s_prev, stable).total
        assert after.tobytes() == before.tobytes(), f"t={t}"
        for name in ck["expanded"].frozen:
            assert ck["model"].params[name].tobytes() == ck["expanded"].params[name].tobytes()
            assert ck["model"].params[name].tobytes() == ck["rectified"].params[name].tobytes()
        checked += len(stable)
    record_detail(f"{checked} stable centers over t=2..{data.T}, bit-identical")


def _delta_with_additions_and_deletions(rng, s):
    ids = [int(v) for v in s.nodes]
    n_del = max(1, int(rng.binomial(len(ids), 0.1))) if len(ids) > 1 else 0
    deleted = sorted(int(v) for v in rng.choice(ids, size=n_del, replace=False)) if n_del else []
    gone = set(deleted)
    alive = [v for v in ids if v not in gone]
    start = max(ids) + 1
    new = [NewNode(start + i, tuple(rng.normal(size=s.feature_dim)), 0, 0) for i in range(int(rng.integers(1, 4)))]
    pool = alive + [a.id for a in new]
    existing = s.edge_set()
    added = set()
    for a in new:
        for u in rng.choice(pool, size=min(len(pool), 2), replace=False):
            if int(u) != a.id:
                added.add((min(a.id, int(u)), max(a.id, int(u))))
    for _ in range(int(rng.integers(0, 3))):
        if len(alive) > 1:
            u, v = (int(x) for x in rng.choice(alive, size=2, replace=False))
            if (min(u, v), max(u, v)) not in existing:
                added.add((min(u, v), max(u, v)))
    removable = [e for e in sorted(existing) if e[0] not in gone and e[1] not in gone]
    dropped = [e for e in removable if rng.random() < 0.1]
    return SnapshotDelta(tuple(new), tuple(deleted), tuple(sorted(added)), tuple(dropped))


@criterion(5, "decomposition equals the brute-force BFS oracle")
def test_decomposition_oracle(record_detail):
    rng = np.random.default_rng(0)
    mismatches = 0
    for case in range(1000):
        s = random_snapshot(rng, int(rng.integers(2, 61)), float(rng.uniform(0.01, 0.15)))
        delta = _delta_with_additions_and_deletions(rng, s)
        assert delta.added_nodes and delta.deleted_nodes
        k = 1 + case % 2
        got = decompose(s, delta, k)
        want = decompose_bfs([int(v) for v in s.nodes], s.edge_set(), [a.id for a in delta.added_nodes],
                             delta.deleted_nodes, delta.added_edges, delta.deleted_edges, k)
        mismatches += (got.unstable_centers, got.stable_centers, got.changed_centers) != want
    record_detail(f"1000 cases, {mismatches} mismatches")
    assert mismatches == 0


@criterion(6, "loss-partition identities hold as exact sums")
def test_partition_identities(pi_run, record_detail):
    rows = partition_identities(pi_run)
    worst = max(max(r["before"], r["after"]) for r in rows)
    record_detail(f"t=2..{pi_run.data.T}, max abs error {worst:.2e}")
    assert len(rows) == pi_run.data.T - 1
    assert worst <= 1e-9


@criterion(7, "PM/FM match the reference; Pretrain FM is exactly 0")
def test_metrics(method_runs, record_detail):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(2, 12))
        rows = [list(rng.random(i + 1)) for i in range(T)]
        m = AccuracyMatrix.from_rows(rows)
        worst = max(worst, abs(pm(m) - pm_ref(rows)), abs(fm(m) - fm_ref(rows)))
    pre = [fm(method_runs[("pretrain", s)].accuracy_matrix) for s in SEEDS]
    data = bundle_to_graph(generate_stream(GenConfig(p_del_node=0.1, p_del_edge=0.05, seed=9)))
    pre.append(fm(run_baseline(BaselineMethod("pretrain"), data, TrainConfig(seed=9)).accuracy_matrix))
    record_detail(f"max metric error {worst:.1e}; Pretrain FM {pre}")
    assert worst <= 1e-12
    assert all(f == 0.0 for f in pre)


@criterion(8, "method ordering on the T = 6 synthetic stream")
def test_ordering(method_runs, record_detail):
    p = {k: mean_metric(method_runs, k, pm) for k in ("retrain", "pi-gnn", "online", "pretrain")}
    f = {k: mean_metric(method_runs, k, fm) for k in ("retrain", "pi-gnn", "online", "pretrain")}
    record_detail("PM " + " ".join(f"{k} {v:.3f}" for k, v in p.items())
                  + "; FM " + " ".join(f"{k} {v:+.3f}" for k, v in f.items())
                  + f"; {method_runs['elapsed']:.0f}s")
    assert p["retrain"] >= p["pi-gnn"] >= p["online"] >= p["pretrain"]
    assert f["pi-gnn"] - f["online"] >= 0.02
    assert method_runs["elapsed"] < 600


@criterion(9, "distillation to 32 units")
def test_distillation(method_runs, record_detail):
    drops, ratios = [], []
    for seed in SEEDS:
        run = method_runs[("pi-gnn", seed)]
        assert run.final_model.hidden_width == 72 and run.final_model.num_expansions == 5
        student, matrix = distill_run(run, TrainConfig(seed=seed), student_hidden=32)
        assert student.hidden_width == 32 and student.num_expansions == 0
        ratios.append(student.num_params() / run.final_model.num_params())
        drops.append(pm(run.accuracy_matrix) - pm(matrix))
    record_detail(f"param ratio {ratios[0]:.3f}; PM drop per seed " + ", ".join(f"{100 * d:+.2f}" for d in drops)
                  + " points")
    assert max(ratios) <= 0.5
    assert max(drops) <= 0.03


@criterion(10, "expand() preserves total logits to 0 ulp")
def test_function_preserving_expansion(record_detail):
    rng = np.random.default_rng(10)
    for _ in range(100):
        backbone = ("sage", "gcn")[int(rng.integers(2))]
        d, C = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        m = init_model(backbone, d, C, int(rng.integers(1, 13)), depth=int(rng.integers(1, 4)),
                       seed=int(rng.integers(1 << 30)), laterals=bool(rng.integers(2)))
        for _ in range(int(rng.integers(0, 3))):
            m = expand(m, int(rng.integers(1, 13)), int(rng.integers(1 << 30)))
        for name, p in m.params.items():
            m.params[name] = p + rng.normal(size=p.shape)
        s = random_snapshot(rng, int(rng.integers(1, 30)), float(rng.uniform(0, 0.3)), d=d, C=C)
        s.features[:] = rng.normal(scale=float(rng.uniform(0.1, 10)), size=s.features.shape)
        grown = expand(m, int(rng.integers(1, 13)), int(rng.integers(1 << 30)))
        assert forward(grown, s).total.tobytes() == forward(m, s).total.tobytes()
    record_detail("100 random models, total logits byte-identical")


@criterion(11, "deletion stream runs end to end; decomposition matches the oracle")
def test_deletion_path(record_detail):
    data = bundle_to_graph(generate_stream(GenConfig(p_del_node=0.1, seed=3)))
    run = continual_run(data, TrainConfig(seed=3))
    removed = 0
    for t in range(2, data.T + 1):
        s_prev, delta = data.snapshots[t - 2], data.deltas[t - 2]
        got = run.checkpoints[t]["decomposition"]
        want = decompose_bfs([int(v) for v in s_prev.nodes], s_prev.edge_set(), [a.id for a in delta.added_nodes],
                             delta.deleted_nodes, delta.added_edges, delta.deleted_edges, 2)
        assert (got.unstable_centers, got.stable_centers, got.changed_centers) == want
        assert got.removed_centers == set(delta.deleted_nodes)
        removed += len(delta.deleted_nodes)
    m = run.accuracy_matrix
    assert all(not np.isnan(m[t, i]) for t in range(1, data.T + 1) for i in range(1, t + 1))
    record_detail(f"{removed} nodes deleted over T={data.T}; PM {pm(m):.3f}, FM {fm(m):+.3f}")
    assert removed > 0


@criterion(12, "first-task nodes activate the initial block more than the expansion block")
def test_activation_specialization(record_detail):
    ratios = []
    for seed in SEEDS:
        data = bundle_to_graph(generate_stream(GenConfig(T=2, seed=seed)))
        run = continual_run(data, TrainConfig(seed=seed))
        nodes = data.task_nodes(1, 2, TEST)
        dump = dump_activations(run.final_model, data.snapshots[1], nodes, layer=1)
        means = dump.block_means()
        assert dump.boundaries == [0, 12, 24]
        ratios.append(means[0] / means[1])
    record_detail(f"layer 1 initial/expansion mean-activation ratio per seed " + ", ".join(f"{r:.2f}" for r in ratios))
    assert ratios[0] > 1
