import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcompress.linalg import RngStream, ShapeError, gaussian, matmul, pinv, svd


def test_matmul_identity_and_hand_example():
    m = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(matmul(a, b) - ref).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_svd_diagonal_and_identity():
    _, s, _ = svd(np.diag([1.0, 3.0]))
    assert np.allclose(s, [3, 1], atol=1e-14)
    _, s, _ = svd(np.eye(4))
    assert np.allclose(s, 1.0, atol=1e-14)


def test_svd_reconstruction_and_orthonormality():
    a = np.random.default_rng(1).standard_normal((6, 4))
    u, s, v = svd(a)
    assert np.abs(u * s @ v.T - a).max() < 1e-12
    assert np.abs(u.T @ u - np.eye(4)).max() < 1e-12
    assert np.abs(v.T @ v - np.eye(4)).max() < 1e-12
    assert np.all(np.diff(s) <= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_svd_matches_numpy_singular_values(rows, cols, seed):
    a = np.random.default_rng(seed).standard_normal((rows, cols))
    _, s, _ = svd(a)
    assert np.allclose(s, np.linalg.svd(a, compute_uv=False), atol=1e-11)


def test_svd_rejects_nan():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


def test_pinv_small_cases():
    assert np.allclose(pinv(np.eye(3)), np.eye(3), atol=1e-15)
    assert np.allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-15)
    assert np.array_equal(pinv(np.zeros((2, 3))), np.zeros((3, 2)))


def test_pinv_full_row_rank_normal_equations():
    m = np.random.default_rng(2).standard_normal((4, 10))
    ref = m.T @ np.linalg.inv(m @ m.T)
    assert np.abs(pinv(m) - ref).max() < 1e-8


def test_gaussian_deterministic_and_distinct():
    s = RngStream(11, 3)
    assert np.array_equal(gaussian(4, 5, s), gaussian(4, 5, s))
    assert not np.array_equal(gaussian(4, 5, s), gaussian(4, 5, RngStream(11, 4)))
    assert not np.array_equal(gaussian(4, 5, s.spawn("a")), gaussian(4, 5, s.spawn("b")))


def test_gaussian_moments():
    x = gaussian(1000, 100, RngStream(5))
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.03


def test_stream_key_range():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(2**64)
