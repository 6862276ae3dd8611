import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
import hypothesis.extra.numpy as nph

from stratfit.regularizers import Regularizer, project_simplex, reg_eval, reg_prox, soft_threshold

vectors = nph.arrays(np.float64, st.integers(min_value=1, max_value=6),
                     elements=st.floats(min_value=-10, max_value=10))
steps = st.floats(min_value=1e-3, max_value=10)


def test_zero_prox_is_identity():
    v = np.array([1.5, -2.0, 0.0])
    np.testing.assert_array_equal(reg_prox(Regularizer(), v, 3.0), v)
    assert reg_eval(Regularizer(), v) == 0.0


def test_sum_squares_prox_scales():
    r = Regularizer('sum-squares', gamma=2.0)
    np.testing.assert_allclose(reg_prox(r, np.array([3.0, -6.0]), 0.5), [1.5, -3.0])
    assert reg_eval(r, np.array([1.0, 2.0])) == pytest.approx(5.0)


def test_soft_threshold_examples():
    np.testing.assert_allclose(soft_threshold(np.array([3.0, -0.5, -4.0]), 1.0), [2.0, 0.0, -3.0])


@settings(deadline=None, max_examples=100)
@given(vectors, steps, st.floats(min_value=0, max_value=5))
def test_l1_prox_satisfies_subgradient_condition(v, t, gamma):
    x = reg_prox(Regularizer('l1', gamma=gamma), v, t)
    g = (v - x) / t
    nonzero = x != 0
    np.testing.assert_allclose(g[nonzero], gamma * np.sign(x[nonzero]), atol=1e-9)
    assert np.all(np.abs(g[~nonzero]) <= gamma + 1e-9)


@settings(deadline=None, max_examples=100)
@given(vectors, steps, st.floats(min_value=0, max_value=5), st.floats(min_value=0, max_value=5))
def test_elastic_prox_satisfies_subgradient_condition(v, t, l1, l2):
    x = reg_prox(Regularizer('elastic', l1=l1, l2=l2), v, t)
    g = (v - x) / t - l2 * x
    nonzero = x != 0
    np.testing.assert_allclose(g[nonzero], l1 * np.sign(x[nonzero]), atol=1e-8)
    assert np.all(np.abs(g[~nonzero]) <= l1 + 1e-8)


@settings(deadline=None, max_examples=100)
@given(vectors, steps, st.floats(min_value=0.01, max_value=5))
def test_l2_norm_prox_is_block_shrinkage(v, t, gamma):
    x = reg_prox(Regularizer('l2', gamma=gamma), v, t)
    norm = np.linalg.norm(v)
    if norm <= gamma * t:
        np.testing.assert_array_equal(x, 0.0)
    else:
        np.testing.assert_allclose(x, (1 - gamma * t / norm) * v, atol=1e-12)


@settings(deadline=None, max_examples=100)
@given(vectors)
def test_simplex_projection_optimality(v):
    p = project_simplex(v)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(p >= 0)
    support = p > 0
    # v - p is constant on the support and no larger off it
    shift = (v - p)[support]
    assert np.ptp(shift) <= 1e-9
    assert np.all(v[~support] <= shift[0] + 1e-9)


def test_simplex_projection_of_simplex_point():
    p = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_simplex(p), p)
    np.testing.assert_allclose(project_simplex(np.array([5.0])), [1.0])


def test_block_projection_is_row_wise(rng):
    V = rng.normal(size=(4, 3))
    out = project_simplex(V)
    for row, v in zip(out, V):
        np.testing.assert_allclose(row, project_simplex(v))


def test_nonneg_and_box_sets():
    r = Regularizer('sum-squares', gamma=1.0, domain='nonneg')
    np.testing.assert_allclose(reg_prox(r, np.array([2.0, -2.0]), 1.0), [1.0, 0.0])
    assert reg_eval(r, np.array([-1.0])) == float('inf')
    box = Regularizer('zero', domain='box', lo=-1.0, hi=2.0)
    np.testing.assert_allclose(reg_prox(box, np.array([-3.0, 0.5, 9.0]), 1.0), [-1.0, 0.5, 2.0])
    assert reg_eval(box, np.array([0.0, 1.0])) == 0.0


def test_l2_with_nonneg_matches_numeric_minimum():
    from scipy.optimize import minimize

    r = Regularizer('l2', gamma=0.8, domain='nonneg')
    v = np.array([1.5, -0.7, 0.4])
    t = 0.6
    x = reg_prox(r, v, t)
    oracle = minimize(lambda z: t * 0.8 * np.linalg.norm(z) + 0.5 * np.sum((z - v) ** 2),
                      np.full(3, 0.5), bounds=[(0, None)] * 3, method='L-BFGS-B',
                      options={'ftol': 1e-15, 'gtol': 1e-12})
    np.testing.assert_allclose(x, oracle.x, atol=1e-5)


def test_intercept_is_left_alone():
    r = Regularizer('l1', gamma=10.0, skip_intercept=True)
    out = reg_prox(r, np.array([[1.0, 2.0, 3.0]]), 1.0)
    np.testing.assert_allclose(out, [[0.0, 0.0, 3.0]])
    assert reg_eval(r, np.array([0.0, 0.0, 100.0])) == 0.0


def test_invalid_regularizers():
    with pytest.raises(ValueError):
        Regularizer('huber')
    with pytest.raises(ValueError):
        Regularizer('l1', gamma=-1.0)
    with pytest.raises(ValueError):
        Regularizer('zero', domain='box', lo=1.0, hi=0.0)
    with pytest.raises(ValueError):
        Regularizer('l1', domain='simplex')
    with pytest.raises(ValueError):
        reg_prox(Regularizer(), np.zeros(2), 0.0)


def test_from_dict_round_trip():
    r = Regularizer.from_dict({'kind': 'elastic', 'l1': 0.1, 'l2': 1.0, 'set': 'nonneg',
                               'skip_intercept': True})
    assert r.domain == 'nonneg'
    assert Regularizer.from_dict(r.to_dict()) == r
    with pytest.raises(ValueError):
        Regularizer.from_dict({'kind': 'l1', 'weight': 2})
