import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import constant_stream, fast_cfg, small_stream
from oracles import decompose_bfs
from pignn.algo import continual_run
from pignn.errors import DimensionMismatch, MissingCheckpoints
from pignn.graph import TRAIN, NewNode, Snapshot, SnapshotDelta, decompose
from pignn.nn import expand, forward, init_model, loss_ce
from pignn.verify import (bound_report, decompose_oracle, decompose_suite, dump_activations, gradcheck_suite,
                          lemma_suite, partition_identities, tightness_curve, verify_lemma, verify_theorem)


@pytest.fixture(scope="module")
def run():
    return continual_run(small_stream(T=3, seed=4), fast_cfg())


# -- lemma ------------------------------------------------------------------------------

def test_lemma_closed_form():
    r = verify_lemma([[2.0, 0.0]], [[1.0, 0.0]], [0])
    # the hand values are rounded (closed forms 0.4401897 and 0.0971747)
    assert abs(r.rhs[0] - 0.440188) < 1e-5 and abs(r.lhs[0] - 0.097173) < 1e-5
    assert math.isclose(r.rhs[0], math.log1p(math.exp(-2)) + math.log1p(math.exp(-1)), rel_tol=1e-14)
    assert math.isclose(r.lhs[0], 2 * math.log1p(math.exp(-3)), rel_tol=1e-14)
    assert r.holds and r.premise.all()


def test_lemma_misclassified_pair_is_flagged_not_failed():
    r = verify_lemma([[-1.0, 0.0]], [[-1.0, 0.0]], [0])
    assert abs(r.lhs[0] - 4.253858) < 1e-5 and abs(r.rhs[0] - 2.626523) < 1e-5
    assert math.isclose(r.lhs[0], 2 * math.log1p(math.e ** 2), rel_tol=1e-14)
    assert r.precondition_violated.all()
    assert r.holds


def test_lemma_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        verify_lemma(np.zeros((2, 3)), np.zeros((2, 2)), [0, 1])
    with pytest.raises(DimensionMismatch):
        verify_lemma(np.zeros((2, 3)), np.zeros((2, 3)), [0])


@given(st.integers(0, 2**31), st.integers(2, 6), st.floats(0.1, 10.0))
def test_lemma_inequality_under_premise(seed, c, scale):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(scale=scale, size=(2, 20, c))
    y = np.argmax(z1, 1)
    r = verify_lemma(z1, z2, y)
    assert np.all(r.margin[r.premise] >= -1e-12)


def test_lemma_equal_logits_gap():
    # with z1 = z2 = z the gap is 2 L(z) - 2 L(2z): zero for logits constant
    # within the node, strictly positive otherwise
    flat = np.full((4, 3), 1.7)
    r = verify_lemma(flat, flat, [0, 1, 2, 0])
    assert np.max(np.abs(r.lhs - r.rhs)) <= 1e-12
    z = np.array([[2.0, 0.0, -1.0]])
    r = verify_lemma(z, z, [0])
    assert r.margin[0] > 0.1


def test_lemma_suite_small():
    r = lemma_suite(1000, seed=3)
    assert r["inequality_holds"] and r["inequality_failures"] == 0 and r["cases"] == 1000


# -- bound ------------------------------------------------------------------------------

def twin_model(seed=0):
    """Expanded model whose new block copies block 0, so f_new == f_stable."""
    m = expand(init_model("sage", 3, 3, 4, depth=2, seed=seed), 4, seed=seed + 1)
    rng = np.random.default_rng(seed)
    for name in list(m.params):
        if ".b0." in name or name in ("out.b0",):
            m.params[name] = m.params[name] + 0.3 * rng.normal(size=m.params[name].shape)
    for name in list(m.params):
        if ".b1." in name or name == "out.b1":
            twin = name.replace(".b1.", ".b0.").replace("in1", "in0").replace("out.b1", "out.b0")
            if ".b1.in0." in name:
                m.params[name] = np.zeros_like(m.params[name])
            else:
                m.params[name] = m.params[twin].copy()
    return m


def graph(n=10, seed=0):
    rng = np.random.default_rng(seed)
    edges = [(i, i + 1) for i in range(n - 1)]
    return Snapshot.from_edges(2, range(n), rng.normal(size=(n, 3)), rng.integers(0, 3, n), [0] * n, edges)


def test_bound_equality_for_identical_zero_paths():
    s = graph()
    m = twin_model()
    for name in m.params:
        if name.startswith("out."):
            m.params[name] = np.zeros_like(m.params[name])
    d = decompose(s, SnapshotDelta(), 2)
    r = bound_report(m, s, d.changed_centers, d.stable_centers)
    assert r.n_changed == 0 and r.n_stable == 10
    assert abs(r.gap) <= 1e-9 and abs(r.lhs - 10 * math.log(3)) < 1e-12
    assert r.residual == 0.0


def test_bound_with_identical_nonzero_paths():
    s = graph()
    m = twin_model()
    lp = forward(m, s)
    assert np.max(np.abs(lp.new_part - lp.stable_part)) < 1e-12
    r = bound_report(m, s, [], s.nodes)
    # total = 2 f, so the gap is L(f) - L(2f): nonnegative on correctly classified nodes
    assert abs(r.gap - (loss_ce(lp.stable_part, s.labels) - loss_ce(lp.total, s.labels))) < 1e-9
    assert r.residual < 1e-12 and r.ok


def test_verify_theorem_on_run(run):
    reports = verify_theorem(run)
    assert [r.t for r in reports] == [2, 3]
    for r in reports:
        assert abs(r.lhs - r.recorded_lhs) <= 1e-9
        assert r.ok
        assert abs(r.gap - (sum(r.rhs_terms) - r.lhs)) < 1e-12
        if r.preconditions_met == 1.0:
            assert r.gap >= -1e-9


def test_verify_theorem_needs_checkpoints():
    bare = continual_run(small_stream(T=2), fast_cfg(), keep_checkpoints=False)
    with pytest.raises(MissingCheckpoints):
        verify_theorem(bare)


def test_partition_identities(run):
    for row in partition_identities(run):
        assert row["before"] <= 1e-9 and row["after"] <= 1e-9


def test_tightness_curve_starts_at_stable_norm(run):
    curve = tightness_curve(run, 2, milestones=(0, 5, 10))
    assert len(curve) == 3
    ck = run.checkpoints[2]
    s = run.data.snapshots[1]
    stable = [int(v) for v in s.nodes_in_split(TRAIN) if int(v) in ck["decomposition"].stable_centers]
    lp = forward(ck["expanded"], s, stable)
    assert abs(curve[0] - np.linalg.norm(lp.stable_part)) < 1e-9


def test_constant_stream_bound_terms():
    run = continual_run(constant_stream(small_stream(T=1), 3), fast_cfg())
    for r in verify_theorem(run):
        assert r.n_changed == 0


# -- gradients, decomposition oracle -------------------------------------------------------

def test_gradcheck_suite_small():
    r = gradcheck_suite(4, seed=11)
    assert r["ok"], r
    assert {c["objective"] for c in r["details"]} == {"rectify", "isolate"}


def test_decompose_suite_small():
    assert decompose_suite(100, seed=2)["ok"]


def test_two_oracles_agree():
    rng = np.random.default_rng(8)
    from pignn.verify import random_delta, random_snapshot

    for _ in range(200):
        s = random_snapshot(rng, int(rng.integers(1, 30)), 0.1)
        delta = random_delta(rng, s, p_del_node=0.2)
        k = int(rng.integers(1, 3))
        a = decompose_oracle(s, delta, k)
        b = decompose_bfs([int(v) for v in s.nodes], s.edge_set(), [x.id for x in delta.added_nodes],
                          delta.deleted_nodes, delta.added_edges, delta.deleted_edges, k)
        assert a == b


# -- activations --------------------------------------------------------------------------

def test_zero_inputs_give_zero_activations():
    n = 5
    s = Snapshot.from_edges(1, range(n), np.zeros((n, 3)), [0] * n, [2] * n, [(0, 1), (1, 2)])
    m = expand(init_model("gcn", 3, 2, 4, seed=1), 3, seed=2)
    for layer in (1, 2):
        dump = dump_activations(m, s, s.nodes, layer)
        assert dump.values.shape == (5, 7) and np.all(dump.values == 0)
        assert dump.boundaries == [0, 4, 7]


def test_activation_layer_range_and_order():
    s = graph()
    m = twin_model()
    with pytest.raises(ValueError):
        dump_activations(m, s, s.nodes, 0)
    with pytest.raises(ValueError):
        dump_activations(m, s, s.nodes, 3)
    dump = dump_activations(m, s, [4, 1, 7], 1)
    assert list(dump.nodes) == [1, 4, 7]
    # identical blocks in the twin model give identical per-block means
    means = dump.block_means()
    assert abs(means[0] - means[1]) < 1e-12
