import numpy as np
import pytest
from hypothesis import given, strategies as st

from lsp_kit.errors import ContractError, UnsupportedSizeError
from lsp_kit.numerics import (frobenius_norm, load_matrix_csv, matmul, power_iteration,
                              save_matrix_csv, spectral_norm, svd_thin)


def _mat(seed, m, n, rank=None):
    r = np.random.default_rng(seed)
    a = r.standard_normal((m, n))
    if rank is not None:
        a = r.standard_normal((m, rank)) @ r.standard_normal((rank, n))
    return a


def test_matmul_checks_shapes():
    with pytest.raises(ContractError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ContractError):
        matmul(np.ones(3), np.ones((3, 1)))
    assert np.array_equal(matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]]), [[1, 2], [3, 4]])


def test_frobenius_norm():
    assert frobenius_norm([[3.0, 4.0]]) == 5.0


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
def test_power_iteration_matches_lapack(seed, m, n):
    a = _mat(seed, m, n)
    res = power_iteration(a)
    assert res.converged
    assert res.value == pytest.approx(np.linalg.norm(a, 2), rel=1e-6)


def test_spectral_norm_of_zero_and_rank_one():
    assert spectral_norm(np.zeros((3, 4))) == 0.0
    u, v = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
    assert spectral_norm(np.outer(u, v)) == pytest.approx(15.0, rel=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 20))
def test_svd_reconstructs_and_is_orthonormal(seed, m, n):
    a = _mat(seed, m, n)
    u, s, v = svd_thin(a)
    k = min(m, n)
    assert u.shape == (m, k) and s.shape == (k,) and v.shape == (n, k)
    assert np.all(np.diff(s) <= 1e-12) and np.all(s >= 0)
    assert np.linalg.norm(u * s @ v.T - a) <= 1e-12 * max(1.0, np.linalg.norm(a))
    assert np.allclose(u.T @ u, np.eye(k), atol=1e-12)
    assert np.allclose(v.T @ v, np.eye(k), atol=1e-12)
    assert np.allclose(s, np.linalg.svd(a, compute_uv=False), atol=1e-11)


def test_svd_rank_deficient_completes_basis():
    a = _mat(3, 10, 8, rank=3)
    u, s, v = svd_thin(a)
    assert np.allclose(u.T @ u, np.eye(8), atol=1e-12)
    assert np.allclose(u * s @ v.T, a, atol=1e-12)
    assert np.all(s[3:] < 1e-12)


def test_svd_zero_matrix():
    u, s, v = svd_thin(np.zeros((4, 3)))
    assert np.all(s == 0)
    assert np.allclose(u.T @ u, np.eye(3))


def test_svd_size_guard():
    with pytest.raises(UnsupportedSizeError):
        svd_thin(np.zeros((513, 513)))


def test_csv_roundtrip_is_exact(tmp_path):
    a = _mat(0, 5, 3) * 1e-7
    save_matrix_csv(tmp_path / "a.csv", a)
    assert np.array_equal(load_matrix_csv(tmp_path / "a.csv"), a)


def test_svd_small_examples():
    _, s, _ = svd_thin(np.diag([2.0, 1.0]))
    assert np.allclose(s, [2.0, 1.0])
    u, v = np.array([1.0, 2.0, 2.0, 0.0]), np.array([3.0, 4.0, 0.0])
    _, s, _ = svd_thin(np.outer(u, v))
    assert s[0] == pytest.approx(15.0, rel=1e-12) and np.all(np.abs(s[1:]) < 1e-12)


def test_power_iteration_agrees_with_svd():
    a = _mat(7, 6, 4)
    assert power_iteration(a).value == pytest.approx(svd_thin(a)[1][0], rel=1e-8)


@given(st.integers(0, 10_000))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.standard_normal((4, 5)), r.standard_normal((5, 3)), r.standard_normal((3, 6))
    lhs, rhs = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.linalg.norm(lhs - rhs) <= 1e-9 * np.linalg.norm(lhs)


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_norm_sandwich(seed, m, n):
    a = _mat(seed, m, n)
    two, fro = spectral_norm(a), frobenius_norm(a)
    rank = np.linalg.matrix_rank(a)
    assert two <= fro * (1 + 1e-9)
    assert fro <= np.sqrt(rank) * two * (1 + 1e-9)


@given(st.integers(0, 10_000), st.integers(2, 9), st.integers(2, 9))
def test_singular_values_permutation_invariant(seed, m, n):
    a = _mat(seed, m, n)
    r = np.random.default_rng(seed + 1)
    b = a[r.permutation(m)][:, r.permutation(n)]
    assert np.allclose(svd_thin(a)[1], svd_thin(b)[1], atol=1e-9)


def test_matmul_bitwise_repeatable():
    a, b = _mat(1, 30, 20), _mat(2, 20, 10)
    assert np.array_equal(matmul(a, b), matmul(a, b))
