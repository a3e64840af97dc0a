import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hierfactor.bench import TruthSpec, bifactor_tree, figure1_tree, generate_truth, simulation_tree
from hierfactor.hierarchy import BlockPartition, one_factor_tree
from hierfactor.icb import (
    ICBConfig, fixed_pattern, greedy_d_search, hyperparam_schedule, ic_zero_children,
    learn_children, penalty_p, tilde_ic,
)


def blocks(*sizes):
    out, start = [], 0
    for s in sizes:
        out.append(tuple(range(start, start + s)))
        start += s
    return BlockPartition(tuple(out), start)


@pytest.fixture(scope="module")
def fig1_truth():
    return generate_truth(TruthSpec(figure1_tree()), np.random.default_rng(0))


# ----------------------------------------------------------------------
# penalty and schedule
# ----------------------------------------------------------------------
def test_penalty_hand_values():
    assert penalty_p((8, 4, 4), (2, 1, 1)) == 23
    assert penalty_p((4, 4), (1, 1)) == 8
    assert penalty_p((8, 4, 4), (3, 1, 5)) == math.inf


def test_penalty_length_mismatch():
    with pytest.raises(ValueError):
        penalty_p((4, 4), (1,))


@given(st.lists(st.integers(1, 12), min_size=1, max_size=5), st.data())
def test_penalty_matches_direct_sum(sizes, data):
    d = [data.draw(st.integers(1, v)) for v in sizes]
    expected = sum(v * x - x * (x - 1) / 2 for v, x in zip(sizes, d))
    assert penalty_p(sizes, d) == expected


@pytest.mark.parametrize("t, size, expected", [
    (2, 16, (4, 6)),
    (2, 6, (0, 6)),
    (7, 10, (3, 1)),
    (3, 12, (4, 5)),
    (8, 30, (0, 0)),
])
def test_schedule(t, size, expected):
    assert hyperparam_schedule(t, size) == expected


def test_schedule_real_rule_allows_six_children():
    assert hyperparam_schedule(2, 40, ICBConfig(cmax_rule="real", d_max=10)) == (6, 10)


def test_schedule_rejects_root_layer():
    with pytest.raises(ValueError):
        hyperparam_schedule(1, 10)


# ----------------------------------------------------------------------
# no-children criterion
# ----------------------------------------------------------------------
def test_zero_children_exact_one_factor():
    truth = generate_truth(TruthSpec(one_factor_tree(6)), np.random.default_rng(1))
    ic, lam, psi = ic_zero_children(None, truth.sigma, 1000)
    assert ic <= 1e-6
    w, V = np.linalg.eigh(truth.sigma - np.eye(6))
    oracle = V[:, -1] * math.sqrt(w[-1])
    est = lam[:, 0]
    assert min(np.abs(est - oracle).max(), np.abs(est + oracle).max()) <= 1e-4


def test_zero_children_identity_covariance():
    ic, lam, psi = ic_zero_children(np.zeros((5, 5)), np.eye(5), 1000)
    assert np.abs(lam).max() < 1e-3
    assert np.allclose(psi ** 2, 1.0, atol=1e-6)
    assert ic < 1e-6


def test_zero_children_loses_to_two_blocks_on_bifactor_data():
    truth = generate_truth(TruthSpec(bifactor_tree([4, 4])), np.random.default_rng(2))
    ic0, _, _ = ic_zero_children(None, truth.sigma, 1000)
    ic2, _, _ = tilde_ic(blocks(4, 4), (1, 1), None, truth.sigma, 1000)
    assert ic0 > ic2 + 100


# ----------------------------------------------------------------------
# fixed-partition criterion
# ----------------------------------------------------------------------
def test_fixed_pattern_layout():
    pat = fixed_pattern(blocks(3, 4), (2, 1))
    assert pat.shape == (7, 4)
    assert pat.mask[:, 0].all()
    assert pat.mask[:3, 1:3].all() and not pat.mask[3:, 1:3].any()
    assert pat.mask[3:, 3].all() and not pat.mask[:3, 3].any()


def test_true_partition_true_d_on_figure1(fig1_truth):
    N = 10_000
    ic, lam, psi = tilde_ic(blocks(8, 4, 4), (3, 1, 1), None, fig1_truth.sigma, N)
    pen = penalty_p((8, 4, 4), (3, 1, 1))
    assert pen == 29
    assert 0 <= ic - pen * math.log(N) <= 1e-6


def test_one_extra_column_costs_its_penalty(fig1_truth):
    N = 100_000
    ic_true, _, _ = tilde_ic(blocks(8, 4, 4), (3, 1, 1), None, fig1_truth.sigma, N)
    ic_big, _, _ = tilde_ic(blocks(8, 4, 4), (4, 1, 1), None, fig1_truth.sigma, N)
    assert ic_big - ic_true == pytest.approx((8 - 3) * math.log(N), abs=0.5)


def test_full_d_is_finite(fig1_truth):
    ic, _, _ = tilde_ic(blocks(8, 4, 4), (8, 4, 4), None, fig1_truth.sigma, 1000)
    assert math.isfinite(ic)


def test_oversized_d_rejected(fig1_truth):
    with pytest.raises(ValueError):
        tilde_ic(blocks(8, 4, 4), (9, 1, 1), None, fig1_truth.sigma, 1000)


# ----------------------------------------------------------------------
# greedy d search
# ----------------------------------------------------------------------
def test_greedy_d_children_of_factor2(fig1_truth):
    idx = np.arange(8)
    S = fig1_truth.sigma[np.ix_(idx, idx)]
    col = fig1_truth.loadings[idx, 0]
    d, steps, (ic, lam, psi) = greedy_d_search(blocks(4, 4), 5, np.outer(col, col), S, 10_000)
    assert d == (1, 1)
    assert [sorted(s) for s in steps] == [[1, 2, 3, 4], [1, 2, 3, 4]]


def test_greedy_d_simulation_factor3():
    truth = generate_truth(TruthSpec(simulation_tree(36)), np.random.default_rng(0))
    idx = np.arange(12, 36)
    S = truth.sigma[np.ix_(idx, idx)]
    col = truth.loadings[idx, 0]
    d, steps, _ = greedy_d_search(blocks(8, 8, 8), 5, np.outer(col, col), S, 2000)
    assert d == (3, 1, 1)
    # the chosen value is the minimiser of its own step
    for s, table in enumerate(steps):
        assert d[s] == min(table, key=lambda k: (table[k], k))


def test_greedy_d_forced_single_point(fig1_truth):
    S = fig1_truth.sigma[:6, :6]
    d, steps, _ = greedy_d_search(blocks(3, 3), 1, None, S, 1000)
    assert d == (1, 1)
    assert [list(s) for s in steps] == [[1], [1]]


# ----------------------------------------------------------------------
# child search
# ----------------------------------------------------------------------
def test_learn_children_root_of_figure1(fig1_truth):
    out = learn_children(range(1, 17), None, fig1_truth.sigma, 10_000, 2, ICBConfig(),
                         np.random.SeedSequence(0))
    assert out.child_count == 3
    assert list(out.child_sets) == [frozenset(range(1, 9)), frozenset(range(9, 13)), frozenset(range(13, 17))]
    assert out.d_tilde == (3, 1, 1)
    assert out.c_max == 4 and out.d == 6
    assert out.ic_table[3] == min(out.ic_table.values())


def test_learn_children_leaf_factor():
    rng = np.random.default_rng(4)
    truth = generate_truth(TruthSpec(one_factor_tree(9)), rng)
    X = rng.standard_normal((2000, 9)) @ np.linalg.cholesky(truth.sigma).T
    S = X.T @ X / 2000
    out = learn_children(range(1, 10), None, S, 2000, 2, ICBConfig(), np.random.SeedSequence(1))
    assert out.c_max == 3
    assert out.child_count == 0 and out.child_sets == ()


def test_learn_children_small_factor_has_no_candidates(fig1_truth):
    out = learn_children(range(1, 7), None, fig1_truth.sigma, 10_000, 2, ICBConfig(), np.random.SeedSequence(0))
    assert out.c_max == 0
    assert out.child_count == 0 and list(out.ic_table) == [0]


def test_learn_children_invariants_and_determinism(fig1_truth):
    col = fig1_truth.loadings[:, 0]
    vs = range(1, 9)
    offset = np.outer(col[:8], col[:8])
    a = learn_children(vs, offset, fig1_truth.sigma, 10_000, 3, ICBConfig(), np.random.SeedSequence(5),
                       num_variables=16)
    b = learn_children(vs, offset, fig1_truth.sigma, 10_000, 3, ICBConfig(), np.random.SeedSequence(5),
                       num_variables=16)
    assert a.child_count == 2
    assert list(a.child_sets) == [frozenset(range(1, 5)), frozenset(range(5, 9))]
    assert a.child_count != 1
    assert np.all(a.column[8:] == 0.0)
    assert all(math.isfinite(v) for v in a.ic_table.values())
    assert sum(len(s) for s in a.child_sets) == 8 and all(len(s) >= 3 for s in a.child_sets)
    assert np.array_equal(a.column, b.column) and a.ic_table == b.ic_table


def test_learn_children_argument_checks(fig1_truth):
    with pytest.raises(ValueError):
        learn_children(range(1, 3), None, fig1_truth.sigma, 100)
    with pytest.raises(ValueError):
        learn_children(range(1, 9), np.zeros((3, 3)), fig1_truth.sigma, 100)
    with pytest.raises(ValueError):
        learn_children(range(1, 9), None, fig1_truth.sigma, None)


def test_config_validation():
    with pytest.raises(ValueError):
        ICBConfig(cmax_rule="other")
    with pytest.raises(ValueError):
        ICBConfig(d_max=0)
