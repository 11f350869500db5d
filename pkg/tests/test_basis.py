import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from qrspec.basis import (
    DomainError,
    KnotVector,
    RangeScaler,
    difference_matrix,
    divided_difference_matrix,
    eval_basis,
    kron_penalties,
    make_knots,
    quantile_knots,
    row_kronecker,
    sum_to_zero,
)


def test_sqrt_n_rule_n100():
    kv = make_knots(100, 2, "sqrt-n")
    np.testing.assert_allclose(kv.knots, np.arange(10) / 9.0)
    assert kv.knots.size == 10
    assert kv.nbasis == 11


def test_sqrt_n_rule_n25_cubic():
    kv = make_knots(25, 3, "sqrt-n")
    assert kv.knots.size == 5
    assert kv.nbasis == 7


def test_explicit_two_knots_degree_one():
    kv = make_knots(4, 1, 2)
    np.testing.assert_array_equal(kv.knots, [0.0, 1.0])
    assert kv.nbasis == 2
    b = eval_basis(kv, [0.0, 0.25, 1.0])
    np.testing.assert_allclose(b, [[1.0, 0.0], [0.75, 0.25], [0.0, 1.0]])


def test_degree_zero_is_interval_indicator():
    kv = KnotVector(np.array([0.0, 0.5, 1.0]), 0)
    b = eval_basis(kv, [0.25, 0.5, 1.0])
    np.testing.assert_array_equal(b, [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])


def test_degree_one_hat_functions():
    kv = KnotVector(np.array([0.0, 0.5, 1.0]), 1)
    b = eval_basis(kv, [0.5, 0.25])
    np.testing.assert_allclose(b, [[0.0, 1.0, 0.0], [0.5, 0.5, 0.0]])


def test_matches_scipy_design_matrix():
    # independent oracle: same clamped knots, dense design matrix
    rng = np.random.default_rng(42)
    for degree in (1, 2, 3):
        for count in (2, 5, 10):
            kv = make_knots(count**2, degree, count)
            x = np.concatenate([rng.random(200), [0.0, 1.0]])
            ours = eval_basis(kv, x)
            theirs = BSpline.design_matrix(x, kv.padded(), degree).toarray()
            assert ours.shape == theirs.shape
            np.testing.assert_allclose(ours, theirs, atol=1e-12)


@settings(deadline=None, max_examples=60)
@given(
    degree=st.integers(0, 4),
    count=st.integers(2, 12),
    xs=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30),
)
def test_partition_of_unity_and_local_support(degree, count, xs):
    kv = make_knots(count**2, degree, count)
    b = eval_basis(kv, np.asarray(xs))
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-12)
    assert b.min() >= -1e-12
    assert (np.count_nonzero(b > 1e-14, axis=1) <= degree + 1).all()


def test_domain_error_outside_unit_interval():
    kv = make_knots(9, 2, 3)
    with pytest.raises(DomainError):
        eval_basis(kv, [0.5, 1.5])
    with pytest.raises(DomainError):
        eval_basis(kv, [-0.2])


def test_difference_matrix_shape_and_nullspace():
    d1 = difference_matrix(4, 1)
    assert d1.shape == (3, 4)
    np.testing.assert_array_equal(d1 @ np.ones(4), 0.0)
    d2 = difference_matrix(6, 2)
    assert d2.shape == (4, 6)
    # constants and ramps are annihilated exactly, no tolerance
    np.testing.assert_array_equal(d2 @ np.ones(6), 0.0)
    np.testing.assert_array_equal(d2 @ np.arange(6.0), 0.0)


def test_difference_matrix_too_small():
    with pytest.raises(ValueError):
        difference_matrix(2, 2)


def test_sum_to_zero_is_orthonormal_complement_of_constants():
    for m in (2, 3, 7):
        z = sum_to_zero(m)
        assert z.shape == (m, m - 1)
        np.testing.assert_allclose(z.T @ np.ones(m), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.T @ z, np.eye(m - 1), atol=1e-12)


def test_row_kronecker_rows_and_order():
    a = np.array([[1.0, 2.0], [0.5, 0.5]])
    b = np.array([[3.0, 4.0, 5.0], [1.0, 0.0, 1.0]])
    rk = row_kronecker(a, b)
    assert rk.shape == (2, 6)
    # column ordering: first factor is the slow index
    np.testing.assert_allclose(rk[0], [3, 4, 5, 6, 8, 10])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_row_kronecker_preserves_partition_of_unity(m1, m2, m3):
    rng = np.random.default_rng(m1 * 16 + m2 * 4 + m3)
    mats = []
    for m in (m1 + 1, m2 + 1, m3 + 1):
        raw = rng.random((5, m)) + 0.01
        mats.append(raw / raw.sum(axis=1, keepdims=True))
    rk = row_kronecker(*mats)
    np.testing.assert_allclose(rk.sum(axis=1), 1.0, atol=1e-12)


def test_kron_penalties_annihilate_separable_polynomials():
    pens = kron_penalties([4, 5], 2)
    assert pens[0].shape == (2 * 5, 20)
    assert pens[1].shape == (4 * 3, 20)
    # theta_ij = a_i * b_j with a linear in i is killed by the first penalty
    a = np.arange(4.0)
    b = np.array([2.0, -1.0, 0.5, 3.0, 1.0])
    theta = np.kron(a, b)
    np.testing.assert_allclose(pens[0] @ theta, 0.0, atol=1e-12)


def test_range_scaler_round_trip_and_domain():
    vals = np.array([3.0, 7.0, 5.0])
    sc = RangeScaler.fit(vals, "x")
    out = sc.transform(vals)
    np.testing.assert_allclose(out, [0.0, 1.0, 0.5])
    assert out.min() == 0.0 and out.max() == 1.0
    with pytest.raises(DomainError):
        sc.transform([2.9])
    with pytest.raises(ValueError):
        RangeScaler.fit(np.ones(5), "const")


def test_greville_reproduces_linear_functions():
    # B(x) @ greville == x exactly is the defining property of the sites
    xs = np.linspace(0.0, 1.0, 101)
    ragged = np.array([0.0, 0.08, 0.13, 0.45, 0.5, 0.97, 1.0])
    for degree in (1, 2, 3):
        for kv in (make_knots(80, degree, 9), KnotVector(ragged, degree)):
            b = eval_basis(kv, xs)
            np.testing.assert_allclose(b @ kv.greville(), xs, atol=1e-12)


def test_greville_degree_zero_midpoints():
    kv = KnotVector(np.array([0.0, 0.4, 1.0]), 0)
    np.testing.assert_allclose(kv.greville(), [0.2, 0.7])


def test_divided_differences_annihilate_site_polynomials():
    rng = np.random.default_rng(3)
    sites = np.sort(rng.random(9))
    for order in (1, 2, 3):
        d = divided_difference_matrix(sites, order)
        assert d.shape == (9 - order, 9)
        for k in range(order):
            np.testing.assert_allclose(d @ sites**k, 0.0, atol=1e-10)
        # degree `order` survives
        assert np.abs(d @ sites**order).max() > 1e-6


def test_divided_differences_reduce_to_plain_on_equispaced():
    sites = np.linspace(0.2, 0.8, 7)
    for order in (1, 2, 3):
        d = divided_difference_matrix(sites, order)
        np.testing.assert_allclose(d, difference_matrix(7, order), atol=1e-12)


def test_divided_differences_validation():
    with pytest.raises(ValueError):
        divided_difference_matrix([0.1, 0.1, 0.5], 1)  # not strictly increasing
    with pytest.raises(ValueError):
        divided_difference_matrix([0.1, 0.5], 2)  # too few sites


def test_quantile_knots_boundaries_and_count():
    rng = np.random.default_rng(11)
    vals = rng.beta(0.4, 0.4, 400)  # mass piled at both ends
    kv = quantile_knots(vals, 2, "sqrt-n")
    assert kv.knots[0] == 0.0 and kv.knots[-1] == 1.0
    assert kv.knots.size == 20  # ceil(sqrt(400))
    assert np.all(np.diff(kv.knots) > 0)
    # roughly equal data share between consecutive knots
    counts, _ = np.histogram(vals, bins=kv.knots)
    assert counts.min() >= 400 // 20 - 6


def test_quantile_knots_dedupe_ties():
    vals = np.concatenate([np.zeros(50), np.ones(50), [0.5]])
    kv = quantile_knots(vals, 1, 8)
    assert kv.knots[0] == 0.0 and kv.knots[-1] == 1.0
    assert np.all(np.diff(kv.knots) > 1e-8)


def test_quantile_knots_domain_checks():
    with pytest.raises(DomainError):
        quantile_knots(np.array([0.0, 0.5, 1.2]), 2, 4)
    with pytest.raises(ValueError):
        quantile_knots(np.empty(0), 2, 4)
