import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidlab.errors import NumericError, ShapeError
from reidlab.numerics import (
    GradCheckReport,
    Matrix,
    Rng,
    as_matrix,
    finite_diff_check,
    matmul,
    pairwise_euclidean,
    rng_normal,
)
from support import naive_matmul, naive_pairwise_euclidean


def test_as_matrix_coerces_and_validates():
    m = as_matrix([[1, 2], [3, 4]])
    assert m.dtype == np.float64 and m.flags["C_CONTIGUOUS"]
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])
    with pytest.raises(NumericError):
        as_matrix([[np.nan, 0.0]])
    # opt-out for internal intermediates
    as_matrix([[np.inf, 0.0]], check_finite=False)


def test_matmul_matches_triple_loop_bitwise():
    rng = Rng(0)
    for trial in range(20):
        r = rng.split(f"t{trial}")
        n, k, m = (int(r.integers(1, 7)) for _ in range(3))
        a = r.split("a").normal(n, k)
        b = r.split("b").normal(k, m)
        got = matmul(a, b)
        want = naive_matmul(a, b)
        assert np.array_equal(got, want)  # bitwise, not approx


def test_matmul_identity_and_shapes():
    a = Rng(3).normal(4, 5)
    assert np.array_equal(matmul(a, np.eye(5)), a)
    assert matmul(np.zeros((0, 3)), np.zeros((3, 2))).shape == (0, 2)
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        matmul(np.zeros(3), np.zeros((3, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_matmul_property_bitwise_vs_oracle(seed, n, k, m):
    r = Rng(seed).split("prop")
    a = r.split("a").normal(n, k)
    b = r.split("b").normal(k, m)
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_pairwise_euclidean_matches_naive():
    rng = Rng(1)
    a = rng.split("a").normal(7, 5)
    b = rng.split("b").normal(9, 5)
    np.testing.assert_allclose(
        pairwise_euclidean(a, b), naive_pairwise_euclidean(a, b), rtol=0, atol=1e-12
    )


def test_pairwise_euclidean_identical_rows_exact_zero():
    # the accumulation orders are arranged so <x,x> cancels exactly
    a = Rng(2).normal(6, 8) * 3.7
    d = pairwise_euclidean(a, a)
    assert np.all(np.diag(d) == 0.0)
    b = np.vstack([a[0], a[0]])
    assert pairwise_euclidean(b, b)[0, 1] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pairwise_euclidean_property(seed):
    r = Rng(seed).split("pd")
    a = r.split("a").normal(4, 3)
    b = r.split("b").normal(5, 3)
    d = pairwise_euclidean(a, b)
    assert np.all(d >= 0.0)
    np.testing.assert_allclose(d, naive_pairwise_euclidean(a, b), rtol=0, atol=1e-12)
    assert pairwise_euclidean(a, a.copy())[0, 0] == 0.0


def test_pairwise_shape_errors():
    with pytest.raises(ShapeError):
        pairwise_euclidean(np.zeros((2, 3)), np.zeros((2, 4)))


def test_rng_determinism_and_split_independence():
    a = Rng(42).split("x").normal(3, 3)
    b = Rng(42).split("x").normal(3, 3)
    assert np.array_equal(a, b)

    # split identity depends on the path only, not on consumption
    r1 = Rng(7)
    r1.normal(10, 10)  # consume a lot
    child_after = r1.split("c").normal_vec(5)
    child_fresh = Rng(7).split("c").normal_vec(5)
    assert np.array_equal(child_after, child_fresh)

    # distinct tags give distinct streams; nested paths too
    assert not np.array_equal(Rng(7).split("a").normal_vec(4), Rng(7).split("b").normal_vec(4))
    assert not np.array_equal(
        Rng(7).split("a").split("b").normal_vec(4), Rng(7).split("ab").normal_vec(4)
    )


def test_rng_helpers_shapes():
    r = Rng(0)
    assert rng_normal(r.split("n"), 2, 3).shape == (2, 3)
    p = r.split("p").permutation(10)
    assert sorted(p) == list(range(10))
    c = r.split("c").choice(np.arange(5), size=7, replace=True)
    assert c.shape == (7,) and set(c) <= set(range(5))
    v = r.split("i").integers(0, 4, size=100)
    assert v.min() >= 0 and v.max() < 4


def test_finite_diff_quadratic():
    f = lambda x: float(x[0] ** 2)
    rep = finite_diff_check(f, np.array([3.0]), np.array([6.0]))
    assert isinstance(rep, GradCheckReport)
    assert rep.max_rel_error < 1e-8
    assert rep.num_params == 1
    assert rep.ok()


def test_finite_diff_flags_wrong_gradient():
    f = lambda x: float(np.sum(x**2))
    x = np.array([1.0, 2.0, 3.0])
    good = 2 * x
    bad = good.copy()
    bad[1] = -good[1]
    assert finite_diff_check(f, x, good).ok()
    rep = finite_diff_check(f, x, bad)
    assert not rep.ok()
    assert rep.worst_coordinate == 1


def test_finite_diff_nonfinite_raises():
    def f(x):
        return float("nan")

    with pytest.raises(NumericError):
        finite_diff_check(f, np.array([1.0]), np.array([0.0]))


def test_finite_diff_shape_mismatch():
    with pytest.raises(ShapeError):
        finite_diff_check(lambda x: 0.0, np.zeros(3), np.zeros(2))


def test_matrix_alias_is_ndarray():
    assert Matrix is np.ndarray
