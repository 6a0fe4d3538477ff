import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drcontrol.ambiguity import (
    Selection,
    build_tree,
    expect_under_selection,
    make_discrete_stage,
    moment_matched_gaussian_stage,
    node_probabilities,
    refine_sup_over_ties,
    sublinear_backward,
    worst_case_value,
)
from drcontrol.errors import (
    BudgetExceeded,
    CapTooSmall,
    DuplicateSupportPoint,
    EmptySupport,
    NegativeWeight,
    WeightSumNotOne,
)

EX3_POINTS = [[1.0], [0.0], [-1.0]]
EX3_WEIGHTS = [[1 / 3, 1 / 3, 1 / 3], [1 / 6, 2 / 3, 1 / 6]]  # theta = 2/3 then 1/3


def ex3_stage():
    return make_discrete_stage(EX3_POINTS, EX3_WEIGHTS, labels=["F_{2/3}", "F_{1/3}"])


def random_stage(rng, n_points=None, n_cands=None, d=1):
    S = n_points or int(rng.integers(2, 5))
    K = n_cands or int(rng.integers(1, 4))
    while True:
        pts = rng.uniform(-2, 2, size=(S, d)).round(3)
        if len({tuple(p) for p in pts}) == S:
            break
    w = rng.random((K, S)) + 0.05
    w /= w.sum(axis=1, keepdims=True)
    return make_discrete_stage(pts, w)


def random_tree(rng, max_stages=3):
    N = int(rng.integers(1, max_stages + 1))
    return build_tree([random_stage(rng) for _ in range(N)])


def random_selection(rng, tree):
    return Selection(
        tuple(
            rng.integers(0, tree.stages[k].n_candidates, size=tree.node_counts[k])
            for k in range(tree.n_stages)
        )
    )


# --- construction -----------------------------------------------------------


def test_example3_stage_moments():
    st_ = ex3_stage()
    tree = build_tree([st_])
    w2 = (st_.support[:, 0]) ** 2
    up = sublinear_backward(tree, w2)
    assert up.value == pytest.approx(2 / 3, abs=1e-15)
    assert list(up.argmax_sets[0][0]) == [True, False]  # theta = 2/3 listed first
    dn = sublinear_backward(tree, -w2)
    assert dn.value == pytest.approx(-1 / 3, abs=1e-15)
    assert list(dn.argmax_sets[0][0]) == [False, True]


def test_point_mass_stage():
    st_ = make_discrete_stage([[0.0]], [[1.0]])
    assert st_.n_points == 1 and st_.n_candidates == 1


def test_weight_sum_not_one():
    with pytest.raises(WeightSumNotOne):
        make_discrete_stage([[1.0], [0.0]], [[0.5, 0.6]])


def test_negative_weight():
    with pytest.raises(NegativeWeight):
        make_discrete_stage([[1.0], [0.0]], [[1.2, -0.2]])


def test_duplicate_support_point():
    with pytest.raises(DuplicateSupportPoint):
        make_discrete_stage([[1.0], [1.0]], [[0.5, 0.5]])


def test_empty_support():
    with pytest.raises(EmptySupport):
        make_discrete_stage([], [])
    with pytest.raises(EmptySupport):
        make_discrete_stage([[1.0]], [])


def test_moment_matched_axis_weights():
    # solve p*(±c)^2 summing to sigma^2: p = sigma^2 / (2 c^2); cross-check moments
    stage = moment_matched_gaussian_stage([[np.sqrt(2), 1.0], [1.0, np.sqrt(2)]], 2.0)
    assert stage.n_points == 9
    # axis marginals for sigma = (sqrt2, 1)
    w = stage.weights[0].reshape(3, 3)
    np.testing.assert_allclose(w.sum(axis=1), [0.25, 0.5, 0.25], atol=1e-15)
    np.testing.assert_allclose(w.sum(axis=0), [0.125, 0.75, 0.125], atol=1e-15)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    # exact mean zero and per-axis variances, independent axes
    for cand, sig in ((0, (2.0, 1.0)), (1, (1.0, 2.0))):
        mean = stage.weights[cand] @ stage.support
        np.testing.assert_allclose(mean, [0.0, 0.0], atol=1e-15)
        var = stage.weights[cand] @ stage.support ** 2
        np.testing.assert_allclose(var, sig, atol=1e-14)
        cross = stage.weights[cand] @ (stage.support[:, 0] * stage.support[:, 1])
        assert cross == pytest.approx(0.0, abs=1e-15)


def test_moment_matched_coin():
    stage = moment_matched_gaussian_stage([[1.0]], 1.0)
    np.testing.assert_allclose(stage.weights[0], [0.5, 0.0, 0.5], atol=1e-15)


def test_cap_too_small():
    with pytest.raises(CapTooSmall):
        moment_matched_gaussian_stage([[2.0]], 1.0)


# --- trees -------------------------------------------------------------------


def test_tree_counts():
    g = moment_matched_gaussian_stage([[1.0, 1.0]], 2.0)
    tree = build_tree([g] * 4)
    assert tree.node_counts == (1, 9, 81, 729, 6561)


def test_tree_single_stage():
    tree = build_tree([ex3_stage()])
    assert tree.node_counts == (1, 3)


def test_budget_exceeded():
    pts = [[float(i)] for i in range(10)]
    w = [[0.1] * 10]
    stage = make_discrete_stage(pts, w)
    with pytest.raises(BudgetExceeded) as err:
        build_tree([stage] * 8)
    assert err.value.size == 10 ** 8


def test_path_noise_indexing():
    tree = build_tree([ex3_stage()] * 3)
    w = tree.path_noise(3)
    # node (j1, j2, j3) = index j1*9 + j2*3 + j3; support = [1, 0, -1]
    idx = 1 * 9 + 0 * 3 + 2
    assert w[1][idx, 0] == EX3_POINTS[1][0]
    assert w[2][idx, 0] == EX3_POINTS[0][0]
    assert w[3][idx, 0] == EX3_POINTS[2][0]


# --- sublinear expectation -----------------------------------------------------


def test_singleton_matches_plain_average():
    rng = np.random.default_rng(0)
    stage = random_stage(rng, n_cands=1)
    tree = build_tree([stage, stage])
    payload = rng.normal(size=tree.node_counts[-1])
    res = sublinear_backward(tree, payload)
    w = stage.weights[0]
    expected = w @ (payload.reshape(stage.n_points, stage.n_points) @ w)
    assert res.value == pytest.approx(expected, abs=1e-12)


def test_gaussian_pair_tie():
    g = moment_matched_gaussian_stage([[np.sqrt(2), 1.0], [1.0, np.sqrt(2)]], 2.0)
    tree = build_tree([g])
    payload = (g.support[:, 0] + g.support[:, 1]) ** 2
    # independent check: both weighted sums equal 3
    for cand in range(2):
        assert g.weights[cand] @ payload == pytest.approx(3.0, abs=1e-12)
    res = sublinear_backward(tree, payload)
    assert res.value == pytest.approx(3.0, abs=1e-12)
    assert res.argmax_sets[0][0].all()


def test_dominance_and_attainment_random():
    rng = np.random.default_rng(42)
    for _ in range(50):
        tree = random_tree(rng)
        payload = rng.normal(size=tree.node_counts[-1]) * 3
        res = sublinear_backward(tree, payload)
        for _ in range(5):
            sel = random_selection(rng, tree)
            val, conds = expect_under_selection(tree, sel, payload)
            assert val <= res.value + 1e-12
            for k in range(tree.n_stages + 1):
                assert np.all(
                    conds.stage(k) <= res.conditionals.stage(k) + 1e-12
                )
        vstar, _ = expect_under_selection(tree, res.canonical_selection(), payload)
        assert vstar == pytest.approx(res.value, abs=1e-12)


def test_worst_case_value_matches_backward():
    rng = np.random.default_rng(5)
    tree = random_tree(rng)
    payload = rng.normal(size=(4, tree.node_counts[-1]))
    vals = worst_case_value(tree, payload)
    for b in range(4):
        assert vals[b] == pytest.approx(sublinear_backward(tree, payload[b]).value)


def test_deterministic_stage_constant_conditionals():
    point = make_discrete_stage([[0.0]], [[1.0]])
    st2 = ex3_stage()
    tree = build_tree([point, st2])
    payload = np.array([1.0, 2.0, 3.0])
    _, conds = expect_under_selection(
        tree, Selection((np.zeros(1, int), np.zeros(1, int))), payload
    )
    assert conds.stage(0).shape == (1,) and conds.stage(1).shape == (1,)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 7.5))
def test_axioms(seed, lam):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    X = rng.normal(size=tree.node_counts[-1]) * 2
    Y = rng.normal(size=tree.node_counts[-1]) * 2
    c = float(rng.normal())
    ex = lambda Z: sublinear_backward(tree, Z).value
    slack = 1e-10
    assert ex(X + Y) <= ex(X) + ex(Y) + slack                      # subadditivity
    assert ex(lam * X) == pytest.approx(lam * ex(X), abs=1e-9)     # pos. homogeneity
    assert ex(X + c) == pytest.approx(ex(X) + c, abs=1e-10)        # constant shift
    assert ex(np.minimum(X, Y)) <= min(ex(X), ex(Y)) + slack       # monotonicity


# --- probabilities ----------------------------------------------------------------


def test_root_probability():
    tree = build_tree([ex3_stage()])
    probs = node_probabilities(tree, Selection((np.zeros(1, int),)))
    assert probs.stage(0)[0] == 1.0


def test_example3_probability_under_f13():
    tree = build_tree([ex3_stage()])
    sel = Selection((np.array([1]),))  # F_{1/3}: weights (1/6, 2/3, 1/6)
    probs = node_probabilities(tree, sel)
    assert probs.stage(1)[1] == pytest.approx(2 / 3)  # node W_1 = 0
    assert probs.stage(1).sum() == pytest.approx(1.0, abs=1e-12)


def test_coin_tree_leaf_probabilities():
    coin = make_discrete_stage([[1.0], [-1.0]], [[0.5, 0.5]])
    tree = build_tree([coin, coin])
    sel = Selection((np.zeros(1, int), np.zeros(2, int)))
    probs = node_probabilities(tree, sel)
    np.testing.assert_allclose(probs.stage(2), 0.25)


def test_stage_probabilities_sum_to_one():
    rng = np.random.default_rng(11)
    tree = random_tree(rng)
    sel = random_selection(rng, tree)
    probs = node_probabilities(tree, sel)
    for k in range(tree.n_stages + 1):
        assert probs.stage(k).sum() == pytest.approx(1.0, abs=1e-12)


# --- tie refinement ------------------------------------------------------------------


def test_refine_no_ties_equals_canonical():
    rng = np.random.default_rng(103)
    for _ in range(20):
        tree = random_tree(rng)
        payload = rng.normal(size=tree.node_counts[-1]) * 2
        res = sublinear_backward(tree, payload)
        if any(m.sum(axis=1).max() > 1 for m in res.argmax_sets):
            continue
        secondary = rng.normal(size=tree.node_counts[-1])
        val, sel = refine_sup_over_ties(tree, res.argmax_sets, secondary)
        ref, _ = expect_under_selection(tree, res.canonical_selection(), secondary)
        assert val == pytest.approx(ref, abs=1e-12)


def test_refine_picks_larger_secondary_on_tie():
    g = moment_matched_gaussian_stage([[np.sqrt(2), 1.0], [1.0, np.sqrt(2)]], 2.0)
    tree = build_tree([g])
    primary = (g.support[:, 0] + g.support[:, 1]) ** 2   # both candidates tie at 3
    res = sublinear_backward(tree, primary)
    secondary = g.support[:, 0] ** 2                     # E = theta^2: 2 vs 1
    v0 = g.weights[0] @ secondary
    v1 = g.weights[1] @ secondary
    val, sel = refine_sup_over_ties(tree, res.argmax_sets, secondary)
    assert val == pytest.approx(max(v0, v1), abs=1e-12)
    assert sel.indices[0][0] == int(np.argmax([v0, v1]))


def test_refine_constant_secondary():
    g = moment_matched_gaussian_stage([[np.sqrt(2), 1.0], [1.0, np.sqrt(2)]], 2.0)
    tree = build_tree([g, g])
    primary = np.zeros(tree.node_counts[-1])             # everything tied
    res = sublinear_backward(tree, primary)
    val, _ = refine_sup_over_ties(tree, res.argmax_sets, np.full(81, 2.5))
    assert val == pytest.approx(2.5, abs=1e-12)


def test_refine_dominates_all_tied_selections_exhaustive():
    rng = np.random.default_rng(77)
    checked = 0
    while checked < 8:
        tree = random_tree(rng, max_stages=2)
        # discretize payload so ties actually occur
        payload = rng.integers(-2, 3, size=tree.node_counts[-1]).astype(float)
        res = sublinear_backward(tree, payload)
        tie_lists = []
        for k in range(tree.n_stages):
            tie_lists.extend(
                [tuple(np.flatnonzero(res.argmax_sets[k][i]))
                 for i in range(tree.node_counts[k])]
            )
        total = np.prod([len(t) for t in tie_lists])
        if total > 64:
            continue
        secondary = rng.normal(size=tree.node_counts[-1])
        val, _ = refine_sup_over_ties(tree, res.argmax_sets, secondary)
        best = -np.inf
        for combo in itertools.product(*tie_lists):
            idx = []
            pos = 0
            for k in range(tree.n_stages):
                cnt = tree.node_counts[k]
                idx.append(np.array(combo[pos : pos + cnt], dtype=int))
                pos += cnt
            v, _ = expect_under_selection(tree, Selection(tuple(idx)), secondary)
            assert v <= val + 1e-12
            best = max(best, v)
        assert val == pytest.approx(best, abs=1e-12)
        checked += 1
