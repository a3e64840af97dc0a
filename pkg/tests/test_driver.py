import json
import math

import numpy as np
import pytest

from hierfactor.bench import TruthSpec, bifactor_tree, figure1_tree, generate_truth
from hierfactor.driver import FitConfig, accumulate_offset, fit_hierarchical
from hierfactor.hierarchy import one_factor_tree, pattern_from_tree, validate_tree
from hierfactor.objective import SampleCovariance


def max_signed_deviation(est, true):
    """Largest absolute entry difference after the best per-column sign flip."""
    out = 0.0
    for k in range(true.shape[1]):
        out = max(out, min(np.abs(est[:, k] - true[:, k]).max(), np.abs(est[:, k] + true[:, k]).max()))
    return out


@pytest.fixture(scope="module")
def fig1_fit():
    truth = generate_truth(TruthSpec(figure1_tree()), np.random.default_rng(11))
    return truth, fit_hierarchical(SampleCovariance(truth.sigma, 10_000), FitConfig(), seed=0)


@pytest.fixture(scope="module")
def small_truth():
    return generate_truth(TruthSpec(bifactor_tree([4, 4, 4])), np.random.default_rng(5))


# ----------------------------------------------------------------------
# offsets
# ----------------------------------------------------------------------
def test_offset_without_columns_is_zero():
    assert np.array_equal(accumulate_offset([], [1, 2, 3]), np.zeros((3, 3)))


def test_offset_single_column_is_outer_product():
    a, b = 0.7, -1.3
    col = np.array([a, b, 5.0])
    assert np.allclose(accumulate_offset([col], [1, 2]), [[a * a, a * b], [a * b, b * b]])


def test_offset_two_columns_psd_rank_two(rng):
    cols = [rng.standard_normal(6), rng.standard_normal(6)]
    off = accumulate_offset(cols, range(1, 7))
    ev = np.linalg.eigvalsh(off)
    assert ev.min() >= -1e-12
    assert (ev > 1e-10).sum() <= 2


# ----------------------------------------------------------------------
# end to end
# ----------------------------------------------------------------------
def test_figure1_exact_recovery(fig1_fit):
    truth, fit = fig1_fit
    assert fit.T == 3 and fit.K == 6
    assert fit.tree.variable_sets() == truth.tree.variable_sets()
    assert max_signed_deviation(fit.loadings, truth.loadings) <= 1e-3


def test_fit_invariants(fig1_fit):
    truth, fit = fig1_fit
    assert validate_tree(fit.tree).ok
    mask = pattern_from_tree(fit.tree).mask
    assert np.all(fit.loadings[~mask] == 0.0)
    assert np.all(fit.psi >= 0)
    assert fit.discrepancy <= fit.stitched_discrepancy + 1e-9
    assert fit.bic == pytest.approx(fit.discrepancy + fit.num_params * math.log(10_000))
    assert fit.num_params == int(mask.sum()) + 16
    assert [o.child_count for o in fit.outcomes] == [3, 2, 0, 0, 0, 0]
    assert all(o.child_count != 1 for o in fit.outcomes)


def test_fit_layers_follow_offset_schedule(fig1_fit):
    _, fit = fig1_fit
    assert [o.layer for o in fit.outcomes] == [2, 3, 3, 3, 4, 4]
    assert fit.layers == [[1], [2, 3, 4], [5, 6]]


def test_fit_serializes(fig1_fit):
    _, fit = fig1_fit
    payload = json.loads(json.dumps(fit.to_dict()))
    assert payload["K"] == 6 and payload["T"] == 3
    assert len(payload["factors"]) == 6


def test_one_factor_truth_gives_single_factor():
    truth = generate_truth(TruthSpec(one_factor_tree(9)), np.random.default_rng(3))
    fit = fit_hierarchical(SampleCovariance(truth.sigma, 2000), seed=1)
    assert fit.T == 1 and fit.K == 1
    assert fit.discrepancy <= 1e-6


def test_fit_is_deterministic(small_truth):
    cov = SampleCovariance(small_truth.sigma, 1000)
    a = fit_hierarchical(cov, seed=7)
    b = fit_hierarchical(cov, seed=7)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert a.tree.variable_sets() == small_truth.tree.variable_sets()


def test_fit_rejects_bad_inputs(small_truth):
    with pytest.raises(TypeError):
        fit_hierarchical(small_truth.sigma)
    with pytest.raises(ValueError):
        fit_hierarchical(SampleCovariance(np.eye(2), 10))
