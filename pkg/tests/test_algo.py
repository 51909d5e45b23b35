import math

import numpy as np
import pytest

from helpers import constant_stream, fast_cfg, small_stream, weights_equal
from pignn.algo import (_ISOLATE, _RECTIFY, TrainConfig, continual_run, derive_seed, distill, distill_run,
                        isolate_train, new_model, rectify, task_eval_set, train_initial)
from pignn.errors import ConfigInvalid, EmptyMemory, NotExpanded
from pignn.graph import TEST, TRAIN, MemoryBuffer, decompose, sample_memory
from pignn.metrics import accuracy, fm, pm
from pignn.nn import Adam, LossTerm, backward, expand, forward, freeze_stable, init_model, soft_ce, softmax


@pytest.fixture(scope="module")
def stream():
    return small_stream(T=3)


def train_ids(s):
    return [int(v) for v in s.nodes_in_split(TRAIN)]


# -- config --------------------------------------------------------------------------

def test_defaults():
    c = TrainConfig()
    assert (c.beta, c.lam, c.initial_units, c.expand_units, c.memory_size, c.k) == (0.01, 0.1, 12, 12, 256, 2)
    assert (c.epochs_initial, c.epochs_rectify, c.epochs_isolate, c.lr, c.weight_decay) == (400, 10, 100, 0.001, 0.0)
    assert c.fanout == 10 and c.distill_hidden == 32
    assert c.final_width(6) == 72


def test_config_lambda_alias_and_unknown_keys():
    assert TrainConfig.from_dict({"lambda": 0.5}).lam == 0.5
    assert TrainConfig.from_dict(TrainConfig(lam=0.3).to_dict()).lam == 0.3
    with pytest.raises(ConfigInvalid):
        TrainConfig.from_dict({"learning_rate": 0.1})
    for bad in ({"beta": -1.0}, {"fanout": 0}, {"rectify_scope": "some"}, {"eval_protocol": "x"}, {"k": 0}):
        with pytest.raises(ConfigInvalid):
            TrainConfig.from_dict(bad)


# -- initial training --------------------------------------------------------------------

def test_train_initial_separable_toy():
    data = small_stream(T=1, classes_per_task=2, nodes_per_class_per_task=50, noise_sigma=0.1, p_out=0.0)
    cfg = TrainConfig()
    s = data.snapshots[0]
    model = train_initial(new_model(cfg, data), s, cfg)
    assert accuracy(model, s, s.nodes_in_split(TRAIN)) >= 0.95


def test_train_initial_zero_epochs_and_determinism(stream):
    cfg = fast_cfg()
    m0 = new_model(cfg, stream)
    assert weights_equal(train_initial(m0, stream.snapshots[0], cfg, epochs=0), m0)
    a = train_initial(m0, stream.snapshots[0], cfg)
    b = train_initial(new_model(cfg, stream), stream.snapshots[0], cfg)
    assert weights_equal(a, b) and not weights_equal(a, m0)


# -- rectification ------------------------------------------------------------------------

def test_rectify_beta_zero_is_memory_finetune(stream):
    cfg = fast_cfg(fanout="all")
    s = stream.snapshots[0]
    model = train_initial(new_model(cfg, stream), s, cfg)
    mem = sample_memory(s, 20, 1, pool=train_ids(s))
    unstable = train_ids(s)[:15]
    got = rectify(model, s, mem, unstable, 0.0, 3, cfg)
    want = model.copy()
    opt = Adam(lr=cfg.lr)
    for _ in range(3):
        _, g = backward(want, [LossTerm(s, mem.center_nodes)])
        opt.step(want.params, g)
    assert weights_equal(got, want)


def test_rectify_zero_epochs(stream):
    cfg = fast_cfg()
    s = stream.snapshots[0]
    model = train_initial(new_model(cfg, stream), s, cfg)
    mem = sample_memory(s, 10, 0, pool=train_ids(s))
    assert weights_equal(rectify(model, s, mem, train_ids(s)[:5], 0.01, 0, cfg), model)


def test_rectify_empty_unstable_decreases_memory_loss(stream):
    # one hidden layer and no graph sampling: a small, smooth problem
    cfg = fast_cfg(fanout="all", k=1)
    s = stream.snapshots[0]
    model = init_model("sage", stream.feature_dim, stream.num_classes, 12, depth=1, seed=3)
    mem = sample_memory(s, 40, 2, k=1, pool=train_ids(s))
    history = []
    out = rectify(model, s, mem, [], 0.01, 10, cfg, history)
    final = backward(out, [LossTerm(s, mem.center_nodes)])[0]
    trace = history + [final]
    assert all(b <= a for a, b in zip(trace, trace[1:])), trace


def test_rectify_needs_memory(stream):
    cfg = fast_cfg()
    s = stream.snapshots[0]
    with pytest.raises(EmptyMemory):
        rectify(new_model(cfg, stream), s, MemoryBuffer((), 1), [], 0.01, 1, cfg)


# -- isolation ------------------------------------------------------------------------------

def test_isolate_lambda_zero_is_changed_only(stream):
    cfg = fast_cfg(fanout="all")
    s1, s2 = stream.snapshots[:2]
    model = expand(freeze_stable(train_initial(new_model(cfg, stream), s1, cfg)), 12, seed=5)
    d = decompose(s1, stream.deltas[0], 2)
    changed = [v for v in train_ids(s2) if v in d.changed_centers]
    mem = MemoryBuffer(tuple(train_ids(s1)[:20]), 1)
    got = isolate_train(model, s2, changed, s1, mem, 0.0, 4, cfg)
    want = model.copy()
    opt = Adam(lr=cfg.lr)
    for _ in range(4):
        _, g = backward(want, [LossTerm(s2, changed)])
        opt.step(want.params, g)
    assert weights_equal(got, want)


def test_isolate_moves_only_new_block(stream):
    cfg = fast_cfg()
    s1, s2 = stream.snapshots[:2]
    base = train_initial(new_model(cfg, stream), s1, cfg)
    model = expand(freeze_stable(base), 12, seed=5)
    mem = MemoryBuffer(tuple(train_ids(s1)[:20]), 1)
    out = isolate_train(model, s2, train_ids(s2), s1, mem, 0.1, 10, cfg)
    for name in model.frozen:
        assert out.params[name].tobytes() == model.params[name].tobytes()
    assert np.array_equal(forward(out, s1).stable_part, forward(base, s1).total)
    with pytest.raises(NotExpanded):
        isolate_train(freeze_stable(base), s2, train_ids(s2), s1, mem, 0.1, 1, cfg)


def test_isolate_improves_changed_nodes(stream):
    cfg = fast_cfg(epochs_isolate=100)
    s1, s2 = stream.snapshots[:2]
    d = decompose(s1, stream.deltas[0], 2)
    model = expand(freeze_stable(train_initial(new_model(cfg, stream), s1, cfg)), 12, seed=5)
    test_changed = [int(v) for v in s2.nodes_in_split(TEST) if int(v) in d.changed_centers]
    before = accuracy(model, s2, test_changed)
    out = isolate_train(model, s2, [v for v in train_ids(s2) if v in d.changed_centers], s1,
                        MemoryBuffer((), 1), 0.1, 100, cfg)
    assert accuracy(out, s2, test_changed) > before


# -- full loop ----------------------------------------------------------------------------------

def test_single_snapshot_run():
    data = small_stream(T=1)
    run = continual_run(data, fast_cfg())
    assert run.accuracy_matrix.T == 1
    assert fm(run.accuracy_matrix) is None
    assert pm(run.accuracy_matrix) == run.accuracy_matrix[1, 1]


def test_constant_stream_keeps_accuracies(stream):
    data = constant_stream(stream, 4)
    run = continual_run(data, fast_cfg())
    m = run.accuracy_matrix
    for t in range(1, 5):
        for i in range(1, t + 1):
            assert abs(m[t, i] - m[i, i]) <= 1e-12
    assert run.widths == [12, 24, 36, 48]
    assert all(not run.losses["isolate"].get(t) for t in range(2, 5))


def test_run_is_deterministic(stream):
    a = continual_run(stream, fast_cfg(seed=3))
    b = continual_run(stream, fast_cfg(seed=3))
    assert weights_equal(a.final_model, b.final_model)
    assert a.accuracy_matrix.to_list() == b.accuracy_matrix.to_list()
    c = continual_run(stream, fast_cfg(seed=4))
    assert not weights_equal(a.final_model, c.final_model)


def test_run_checkpoints_and_memory(stream):
    run = continual_run(stream, fast_cfg())
    for t in (2, 3):
        ck = run.checkpoints[t]
        assert {"previous", "rectified", "expanded", "model", "decomposition", "memory", "stable_memory"} <= set(ck)
        s_prev = stream.snapshots[t - 2]
        assert ck["memory"].source_snapshot == s_prev.index
        assert set(ck["memory"].center_nodes) <= set(train_ids(s_prev))
        assert set(ck["stable_memory"].center_nodes) == set(ck["memory"].center_nodes) & ck["decomposition"].stable_centers
    assert [b["t"] for b in run.bound_terms] == [2, 3]


def test_heavy_deletion_note():
    data = small_stream(T=3, p_del_node=0.6, seed=2)
    run = continual_run(data, fast_cfg())
    assert any("distillation recommended" in n for n in run.notes)


def test_eval_protocols(stream):
    s, nodes = task_eval_set(stream, 1, 3, "snapshot")
    assert s is stream.snapshots[0] and set(nodes) == set(stream.snapshots[0].nodes_in_split(TEST))
    s, nodes = task_eval_set(stream, 2, 3, "arrival")
    assert s is stream.snapshots[2] and all(stream.arrival[int(v)] == 2 for v in nodes)


# -- distillation ------------------------------------------------------------------------------

def test_distill_zero_epochs_loss_is_teacher_entropy(stream):
    cfg = fast_cfg()
    s = stream.snapshots[0]
    teacher = train_initial(new_model(cfg, stream), s, cfg)
    q = softmax(forward(teacher, s).total)
    entropy = float(-(q * np.log(q)).sum())
    assert math.isclose(soft_ce(forward(teacher, s).total, q), entropy, rel_tol=1e-12)


def test_distill_student_shape(stream):
    cfg = fast_cfg()
    run = continual_run(stream, cfg)
    student, matrix = distill_run(run, cfg, 32, 5)
    assert student.blocks == [32] and student.num_expansions == 0
    assert matrix.to_list()[:-1] == run.accuracy_matrix.to_list()[:-1]
    zero = distill(run.final_model, MemoryBuffer((), 3), [], 8, 0, cfg, stream.snapshots[-1])
    assert zero.hidden_width == 8


def test_seed_derivation_is_stable():
    assert derive_seed(0, _RECTIFY, 2, 0) == derive_seed(0, _RECTIFY, 2, 0)
    assert derive_seed(0, _RECTIFY, 2, 0) != derive_seed(0, _ISOLATE, 2, 0)


# -- seeded T = 6 experiment -------------------------------------------------------------------

def test_pi_gnn_against_online_and_retrain(method_runs):
    def mean(kind, metric):
        return np.mean([metric(method_runs[(kind, s)].accuracy_matrix) for s in (0, 1, 2)])

    assert mean("pi-gnn", fm) > mean("online", fm)
    assert mean("retrain", pm) - mean("pi-gnn", pm) <= 0.05


def test_pi_gnn_widths(pi_run):
    assert pi_run.widths == [12, 24, 36, 48, 60, 72]
