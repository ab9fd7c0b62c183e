"""Numeric kernel tests against hand-rolled oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osen.numerics import (NumericsError, SpdError, as_tensor, bilinear_shift,
                           check_finite, conv2d_same, fft2, hadamard_pow,
                           ifft2, pca_projection, solve_spd)


# ---------------------------------------------------------------------------
# oracles


def conv2d_same_loops(x, k):
    """Same-padded cross-correlation by explicit loops (no scipy)."""
    H, W = x.shape
    f = k.shape[0]
    c = (f - 1) // 2
    out = np.zeros((H, W))
    for p in range(H):
        for r in range(W):
            acc = 0.0
            for i in range(f):
                for j in range(f):
                    pi, rj = p + i - c, r + j - c
                    if 0 <= pi < H and 0 <= rj < W:
                        acc += k[i, j] * x[pi, rj]
            out[p, r] = acc
    return out


def bilinear_shift_loops(x, alpha, beta):
    """Per-pixel bilinear sampling at (p + alpha, r + beta), zero outside."""
    H, W = x.shape

    def at(pf, rf):
        p0, r0 = int(np.floor(pf)), int(np.floor(rf))
        fp, fr = pf - p0, rf - r0
        acc = 0.0
        for dp, wp in ((0, 1 - fp), (1, fp)):
            for dr, wr in ((0, 1 - fr), (1, fr)):
                pi, ri = p0 + dp, r0 + dr
                if 0 <= pi < H and 0 <= ri < W:
                    acc += wp * wr * x[pi, ri]
        return acc

    return np.array([[at(p + alpha, r + beta) for r in range(W)]
                     for p in range(H)])


def dft_matrix(n):
    w = np.exp(-2j * np.pi / n)
    return np.array([[w ** (i * j) for j in range(n)]
                     for i in range(n)]) / np.sqrt(n)


# ---------------------------------------------------------------------------
# conv2d_same


def test_conv2d_same_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for f in (1, 3, 5):
        x = rng.standard_normal((6, 9))
        k = rng.standard_normal((f, f))
        assert np.allclose(conv2d_same(x, k), conv2d_same_loops(x, k),
                           atol=1e-12)


def test_conv2d_same_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 5))
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    assert np.array_equal(conv2d_same(x, k), x)


def test_conv2d_same_rejects_even_and_nonsquare_kernels():
    x = np.ones((4, 4))
    with pytest.raises(NumericsError):
        conv2d_same(x, np.ones((2, 2)))
    with pytest.raises(NumericsError):
        conv2d_same(x, np.ones((3, 5)))
    with pytest.raises(NumericsError):
        conv2d_same(np.ones(4), np.ones((3, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv2d_same_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 5, 7))
    k = rng.standard_normal((3, 3))
    lhs = conv2d_same(a * x + b * y, k)
    rhs = a * conv2d_same(x, k) + b * conv2d_same(y, k)
    assert np.allclose(lhs, rhs, atol=1e-9)


# ---------------------------------------------------------------------------
# hadamard_pow


def test_hadamard_pow_small_orders():
    x = np.array([[-2.0, 0.5], [3.0, -1.0]])
    assert np.array_equal(hadamard_pow(x, 1), x)
    assert np.array_equal(hadamard_pow(x, 2), x * x)
    assert np.array_equal(hadamard_pow(x, 3), x * x * x)


def test_hadamard_pow_rejects_bad_order():
    with pytest.raises(NumericsError):
        hadamard_pow(np.ones(3), 0)
    with pytest.raises(NumericsError):
        hadamard_pow(np.ones(3), 1.5)


# ---------------------------------------------------------------------------
# bilinear_shift


def test_bilinear_shift_integer_translation():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 7))
    got = bilinear_shift(x, 2, -1)
    want = np.zeros_like(x)
    want[:4, 1:] = x[2:, :6]
    assert np.array_equal(got, want)


def test_bilinear_shift_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 6))
    for alpha, beta in ((0.3, -0.7), (-1.2, 2.6), (0.0, 0.5), (4.9, -4.9)):
        assert np.allclose(bilinear_shift(x, alpha, beta),
                           bilinear_shift_loops(x, alpha, beta), atol=1e-12)


def test_bilinear_shift_exact_on_linear_ramp_interior():
    # interpolation is exact for functions linear in each coordinate, so
    # away from the zero-filled border the shifted ramp is the ramp again
    H, W = 8, 9
    p, r = np.mgrid[0:H, 0:W].astype(float)
    x = 0.7 * p - 1.3 * r + 0.25
    alpha, beta = 1.4, -0.6
    got = bilinear_shift(x, alpha, beta)
    want = 0.7 * (p + alpha) - 1.3 * (r + beta) + 0.25
    assert np.allclose(got[2:-2, 2:-2], want[2:-2, 2:-2], atol=1e-12)


def test_bilinear_shift_far_offsets_vanish():
    x = np.ones((4, 4))
    assert not bilinear_shift(x, 4.0, 0.0).any()
    assert not bilinear_shift(x, 0.0, -4.0).any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1),
       st.floats(-5, 5, allow_nan=False),
       st.floats(-5, 5, allow_nan=False))
def test_bilinear_shift_never_exceeds_input_range(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (5, 5))
    y = bilinear_shift(x, alpha, beta)
    # convex combination of taps and zero fill
    assert y.min() >= -1e-12 and y.max() <= x.max() + 1e-12


# ---------------------------------------------------------------------------
# fourier helpers


def test_fft2_matches_explicit_dft_matrix():
    rng = np.random.default_rng(4)
    n = 6
    x = rng.standard_normal((n, n))
    F = dft_matrix(n)
    assert np.allclose(fft2(x), F @ x @ F.T, atol=1e-10)


def test_fft2_is_unitary_and_invertible():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 8))
    X = fft2(x)
    assert np.isclose(np.linalg.norm(X), np.linalg.norm(x))
    assert np.allclose(ifft2(X).real, x, atol=1e-12)


# ---------------------------------------------------------------------------
# solve_spd


def test_solve_spd_matches_dense_solve():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((7, 7))
    M = a @ a.T + 7 * np.eye(7)
    rhs = rng.standard_normal((7, 3))
    assert np.allclose(solve_spd(M, rhs), np.linalg.solve(M, rhs), atol=1e-10)


def test_solve_spd_rejects_indefinite_and_mismatched():
    M = np.diag([1.0, -1.0])
    with pytest.raises(SpdError):
        solve_spd(M, np.ones(2))
    with pytest.raises(NumericsError):
        solve_spd(np.eye(3), np.ones(4))
    with pytest.raises(NumericsError):
        solve_spd(np.ones((2, 3)), np.ones(2))


# ---------------------------------------------------------------------------
# pca_projection


def test_pca_projection_orthonormal_descending():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 6)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.2])
    A = pca_projection(X, 4)
    assert A.shape == (4, 6)
    assert np.allclose(A @ A.T, np.eye(4), atol=1e-10)
    Z = (X - X.mean(axis=0)) @ A.T
    var = Z.var(axis=0)
    assert np.all(np.diff(var) <= 1e-12)
    # deterministic sign: dominant component of each row is positive
    for row in A:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_projection_captures_planted_direction():
    rng = np.random.default_rng(8)
    d = np.array([3.0, 4.0, 0.0]) / 5.0
    X = rng.standard_normal((200, 1)) * d + 0.01 * rng.standard_normal((200, 3))
    A = pca_projection(X, 1)
    assert abs(abs(A[0] @ d) - 1.0) < 1e-3


def test_pca_projection_errors():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((10, 4))
    with pytest.raises(NumericsError):
        pca_projection(X, 0)
    with pytest.raises(NumericsError):
        pca_projection(X, 5)
    with pytest.raises(NumericsError):
        pca_projection(X[:1], 1)
    # rank-deficient: only 2 informative directions
    low = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 4))
    with pytest.raises(NumericsError):
        pca_projection(low, 3)


# ---------------------------------------------------------------------------
# tensor checks


def test_as_tensor_and_check_finite():
    x = as_tensor([[1, 2], [3, 4]])
    assert x.dtype == np.float64
    with pytest.raises(NumericsError):
        as_tensor([1.0, 2.0], shape=(3,))
    with pytest.raises(NumericsError):
        check_finite(np.array([1.0, np.nan]))
    with pytest.raises(NumericsError):
        check_finite(np.array([np.inf]))


# ---------------------------------------------------------------------------
# pinned hand values


def test_conv2d_same_zero_input_and_zero_kernel():
    rng = np.random.default_rng(11)
    k = rng.standard_normal((3, 3))
    assert not conv2d_same(np.zeros((5, 5)), k).any()
    assert not conv2d_same(rng.standard_normal((5, 5)), np.zeros((3, 3))).any()


def test_bilinear_shift_half_cell_hand_value():
    # single row [1, 2] pushed half a cell to the right: the first sample
    # averages the pair, the second straddles the zero border
    got = bilinear_shift(np.array([[1.0, 2.0]]), 0.0, 0.5)
    assert np.allclose(got, [[1.5, 1.0]], atol=1e-15)


def test_fft2_impulse_and_constant():
    n = 8
    imp = np.zeros((n, n))
    imp[0, 0] = 1.0
    F = fft2(imp)
    assert np.allclose(np.abs(F), 1.0 / n, atol=1e-12)

    const = np.full((n, n), 2.5)
    G = fft2(const)
    assert abs(G[0, 0] - 2.5 * n) < 1e-12
    G[0, 0] = 0.0
    assert np.allclose(G, 0.0, atol=1e-12)


def test_solve_spd_diagonal_hand_value():
    M = np.diag([2.0, 8.0])
    got = solve_spd(M, np.array([4.0, 16.0]))
    assert np.allclose(got, [2.0, 2.0], atol=1e-14)


def test_pca_projection_full_rank_is_isometry():
    # keeping every component just rotates the centered data, so all
    # pairwise inner products survive the projection
    rng = np.random.default_rng(12)
    X = rng.standard_normal((50, 8))
    A = pca_projection(X, 8)
    C = X - X.mean(axis=0)
    Z = C @ A.T
    assert np.allclose(Z @ Z.T, C @ C.T, atol=1e-9)
