import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hierfactor.bench import (
    TruthSpec, check_conditions, figure1_tree, generate_truth, mse_lambda, mse_psi,
    run_benchmark, sample_covariance, score_recovery, score_structure, simulation_tree,
)
from hierfactor.driver import FitResult
from hierfactor.bench import Truth
from hierfactor.hierarchy import one_factor_tree, pattern_from_tree, tree_from_sets

from strategies import loadings_on, valid_trees


def r(a, b):
    return range(a, b + 1)


def fit_from(tree, loadings, unique_variances):
    """A FitResult carrying the given estimates, for scoring tests."""
    return FitResult(tree=tree, loadings=np.asarray(loadings, float),
                     psi=np.sqrt(np.asarray(unique_variances, float)), discrepancy=0.0, bic=0.0,
                     neg2_loglik=0.0, num_params=0, stitched_discrepancy=0.0, outcomes=(),
                     config={}, seed=None)


@pytest.fixture(scope="module")
def fig1_truth():
    return generate_truth(TruthSpec(figure1_tree()), np.random.default_rng(0))


# ----------------------------------------------------------------------
# truth generation and sampling
# ----------------------------------------------------------------------
def test_truth_bounds_and_positivity(fig1_truth):
    mask = pattern_from_tree(fig1_truth.tree).mask
    vals = np.abs(fig1_truth.loadings[mask])
    assert vals.min() >= 0.5 and vals.max() <= 2.0
    assert np.all(fig1_truth.loadings[:, 0] > 0)
    assert np.all(fig1_truth.loadings[~mask] == 0.0)
    assert np.linalg.eigvalsh(fig1_truth.sigma).min() >= 1.0 - 1e-12
    assert np.array_equal(fig1_truth.unique_variances, np.ones(16))


def test_truth_has_both_signs_off_the_general_factor():
    truth = generate_truth(TruthSpec(simulation_tree(36)), np.random.default_rng(1))
    vals = truth.loadings[:, 1:][pattern_from_tree(truth.tree).mask[:, 1:]]
    assert (vals > 0).any() and (vals < 0).any()


def test_truth_reproducible():
    spec = TruthSpec(figure1_tree(), seed=9)
    a, b = generate_truth(spec), generate_truth(spec)
    assert np.array_equal(a.loadings, b.loadings) and np.array_equal(a.sigma, b.sigma)


def test_sample_covariance_unbiased():
    truth = generate_truth(TruthSpec(tree_from_sets([r(1, 6)], 6)), np.random.default_rng(2))
    rng = np.random.default_rng(3)
    draws = np.array([sample_covariance(truth.sigma, 500, rng).S for _ in range(200)])
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / np.sqrt(200)
    assert np.all(np.abs(mean - truth.sigma) <= 3 * se)


def test_sample_covariance_exact_mode(fig1_truth):
    cov = sample_covariance(fig1_truth.sigma, 1234, exact=True)
    assert np.array_equal(cov.S, fig1_truth.sigma) and cov.N == 1234


def test_sample_covariance_divisor_and_centering(fig1_truth):
    a = sample_covariance(fig1_truth.sigma, 100, np.random.default_rng(0))
    b = sample_covariance(fig1_truth.sigma, 100, np.random.default_rng(0), ddof=1)
    assert np.allclose(b.S, a.S * 100 / 99)
    c = sample_covariance(fig1_truth.sigma, 100, np.random.default_rng(0), center=True)
    assert np.all(np.diag(c.S) <= np.diag(a.S) + 1e-12)


def test_sample_covariance_rejects_small_N(fig1_truth):
    with pytest.raises(ValueError):
        sample_covariance(fig1_truth.sigma, 16)


def test_frobenius_error_shrinks_like_root_N(fig1_truth):
    rng = np.random.default_rng(4)
    Ns = [500, 2000, 8000]
    errs = [np.mean([np.linalg.norm(sample_covariance(fig1_truth.sigma, N, rng).S - fig1_truth.sigma)
                     for _ in range(30)]) for N in Ns]
    slope = np.polyfit(np.log(Ns), np.log(errs), 1)[0]
    assert abs(slope + 0.5) <= 0.15


# ----------------------------------------------------------------------
# scoring
# ----------------------------------------------------------------------
def test_score_of_truth_itself(fig1_truth):
    s = score_recovery(fit_from(fig1_truth.tree, fig1_truth.loadings, fig1_truth.unique_variances), fig1_truth)
    assert s.emc == 1 and s.lmc == (1, 1, 1)
    assert s.mse_lambda == 0.0 and s.mse_psi == 0.0
    assert (s.K_hat, s.T_hat, s.layer_counts) == (6, 3, (1, 3, 2))


def test_score_ignores_column_signs(fig1_truth):
    L = fig1_truth.loadings.copy()
    L[:, [1, 4]] *= -1
    s = score_recovery(fit_from(fig1_truth.tree, L, fig1_truth.unique_variances), fig1_truth)
    assert s.emc == 1 and s.mse_lambda == 0.0


def test_wrong_factor_count_has_no_mse(fig1_truth):
    tree = tree_from_sets([r(1, 16), r(1, 8), r(9, 12), r(13, 16)], 16)
    L = fig1_truth.loadings[:, :4]
    s = score_recovery(fit_from(tree, L, np.ones(16)), fig1_truth)
    assert s.emc == 0 and s.mse_lambda is None and s.mse_psi is None
    assert s.lmc == (1, 1, 0) and s.layer_counts == (1, 3, 0)


def test_partial_layer_recovery(fig1_truth):
    tree = tree_from_sets([r(1, 16), r(1, 8), r(9, 12), r(13, 16), r(1, 3), r(4, 8)], 16)
    s = score_recovery(fit_from(tree, fig1_truth.loadings, np.ones(16)), fig1_truth)
    assert s.emc == 0 and s.lmc == (1, 1, 0)


def test_mse_definitions():
    A = np.array([[1.0, 2.0], [3.0, -4.0]])
    B = np.array([[1.0, -2.0], [2.0, 4.0]])
    assert mse_lambda(A, B) == pytest.approx(1.0 / 4)
    assert mse_psi([1.0, 2.0], [1.5, 2.0]) == pytest.approx(0.125)
    with pytest.raises(ValueError):
        mse_lambda(A, B[:, :1])


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_mse_invariant_under_all_sign_flips(seed, K):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((7, K)), rng.standard_normal((7, K))
    base = mse_lambda(A, B)
    for signs in itertools.product([1.0, -1.0], repeat=K):
        q = np.array(signs)
        assert mse_lambda(A * q, B) == pytest.approx(base, rel=1e-12, abs=1e-15)
        assert mse_lambda(A, B * q) == pytest.approx(base, rel=1e-12, abs=1e-15)


@given(st.data())
def test_exact_match_implies_layer_match(data):
    truth = data.draw(valid_trees(max_vars=20))
    other = data.draw(st.one_of(st.just(truth), valid_trees(max_vars=20)))
    if other.num_variables != truth.num_variables:
        other = truth
    emc, lmc, _ = score_structure(other, truth)
    if emc:
        assert all(lmc)


@given(valid_trees(max_vars=20), st.integers(0, 2**32 - 1))
def test_score_from_truth_is_perfect(tree, seed):
    rng = np.random.default_rng(seed)
    L = loadings_on(tree, rng)
    truth = Truth(tree, L, np.ones(tree.num_variables), L @ L.T + np.eye(tree.num_variables))
    s = score_recovery(fit_from(tree, L, np.ones(tree.num_variables)), truth)
    assert s.emc == 1 and s.mse_lambda == 0.0 and s.mse_psi == 0.0


# ----------------------------------------------------------------------
# benchmark runner
# ----------------------------------------------------------------------
def test_single_replication_benchmark():
    res = run_benchmark([(16, 10_000, 1)], tree_factory=lambda J: figure1_tree(), exact=True, seed=3)
    assert len(res.summary) == 1 and len(res.replications) == 1
    row = res.summary[0]
    rep = res.replications[0]
    assert row["reps"] == 1 and row["failures"] == 0
    assert row["emc_rate"] == rep["emc"] == 1
    assert row["L2_count_mean"] == 3.0 and row["lmc3_rate"] == 1.0
    assert "seconds" not in res.summary_csv()
    assert json.loads(res.to_json())["summary"][0]["J"] == 16


# ----------------------------------------------------------------------
# identifiability checks
# ----------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(20))
def test_simulation_truths_pass_all_checks(seed):
    truth = generate_truth(TruthSpec(simulation_tree(36)), np.random.default_rng(seed))
    report = check_conditions(truth.loadings, truth.tree)
    assert report.status == "pass", report.text()


def test_figure1_truth_passes(fig1_truth):
    report = check_conditions(fig1_truth.loadings, fig1_truth.tree)
    assert report.status == "pass"
    assert set(report.by_clause()) >= {"C4", "size", "rank", "pair", "deletion",
                                       "grandchild", "parent_split", "child_split"}


def test_two_variable_factor_triggers_size_clause():
    tree = tree_from_sets([r(1, 10), r(1, 2), r(3, 10)], 10)
    L = loadings_on(tree, np.random.default_rng(0))
    report = check_conditions(L, tree)
    assert report.status == "fail"
    assert [c.factors for c in report.failures("size")] == [(2,)]


def test_proportional_rows_fail_pair_clause(fig1_truth):
    L = fig1_truth.loadings.copy()
    L[9, [0, 2]] = 1.7 * L[8, [0, 2]]
    report = check_conditions(L, fig1_truth.tree)
    assert any(c.factors == (1, 3) for c in report.failures("pair"))


def test_tiny_budget_is_inconclusive_not_pass():
    truth = generate_truth(TruthSpec(simulation_tree(36)), np.random.default_rng(0))
    report = check_conditions(truth.loadings, truth.tree, budget=3)
    assert report.status == "inconclusive"
    assert "inconclusive" in report.by_clause().values()


def test_pattern_mismatch_rejected(fig1_truth):
    L = fig1_truth.loadings.copy()
    L[0, 2] = 0.5
    with pytest.raises(ValueError):
        check_conditions(L, fig1_truth.tree)
    with pytest.raises(ValueError):
        check_conditions(L[:, :5], fig1_truth.tree)


def test_one_factor_tree_checks():
    tree = one_factor_tree(5)
    L = loadings_on(tree, np.random.default_rng(1))
    assert check_conditions(L, tree).status == "pass"
