"""Dense numeric primitives shared by every other module.

All arrays are row-major float64 (complex128 where noted). The helpers here
are deliberately small and side-effect free: 2-D same-padded convolution,
Hadamard powers, bilinear shifting, unitary FFTs, an SPD solver, and PCA.
Layer code builds on these; hot loops live in ``_kernels`` and are verified
against the reference semantics defined here.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.signal import correlate2d

__all__ = [
    "NumericsError",
    "SpdError",
    "as_tensor",
    "check_finite",
    "conv2d_same",
    "hadamard_pow",
    "bilinear_shift",
    "fft2",
    "ifft2",
    "solve_spd",
    "pca_projection",
]


class NumericsError(ValueError):
    """Malformed input to a numeric primitive."""


class SpdError(NumericsError):
    """Matrix was expected to be symmetric positive definite but is not."""


def as_tensor(x, shape=None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally checking shape."""
    t = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and t.shape != tuple(shape):
        raise NumericsError(f"expected shape {tuple(shape)}, got {t.shape}")
    return t


def check_finite(x: np.ndarray, who: str = "tensor") -> np.ndarray:
    """Raise if any entry is NaN/Inf; NaN is an error state, never a value."""
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {who}")
    return x


def conv2d_same(x, k) -> np.ndarray:
    """Same-padded 2-D cross-correlation (the deep-learning 'convolution').

    Zero padding of (f-1)/2 on each side; output extents equal input extents.
    Kernels are learned downstream, so the correlation/convolution flip is
    immaterial — correlation is used so that k[i, j] multiplies x[p+i-c, r+j-c].
    """
    x = as_tensor(x)
    k = as_tensor(k)
    if x.ndim != 2 or k.ndim != 2:
        raise NumericsError("conv2d_same expects 2-D tensors")
    if x.size == 0 or k.size == 0:
        raise NumericsError("empty tensor")
    f, f2 = k.shape
    if f != f2 or f % 2 == 0:
        raise NumericsError(f"kernel must be odd square, got {k.shape}")
    return correlate2d(x, k, mode="same", boundary="fill", fillvalue=0.0)


def hadamard_pow(x, q: int) -> np.ndarray:
    """Component-wise q-th power, q >= 1."""
    if not isinstance(q, (int, np.integer)) or q < 1:
        raise NumericsError(f"hadamard_pow requires integer q >= 1, got {q!r}")
    x = as_tensor(x)
    return x ** int(q)


def bilinear_shift(x, alpha: float, beta: float) -> np.ndarray:
    """Sample x at (p + alpha, r + beta) with bilinear interpolation.

    output[p, r] interpolates the four grid neighbours of (p+alpha, r+beta);
    taps falling outside [0, H-1] x [0, W-1] contribute zero.  At integer
    shifts this is exact translation with zero fill.  Differentiable in
    alpha/beta/x everywhere, with one-sided derivatives at integer shifts
    (floor-based decomposition).
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise NumericsError("bilinear_shift expects a 2-D tensor")
    H, W = x.shape
    ia, ib = int(np.floor(alpha)), int(np.floor(beta))
    fa, fb = float(alpha) - ia, float(beta) - ib

    # zero-extended gather of an integer-translated window
    def grab(di: int, dj: int) -> np.ndarray:
        out = np.zeros((H, W))
        p0, r0 = ia + di, ib + dj          # source offset of output (0, 0)
        ps, pe = max(0, -p0), min(H, H - p0)
        rs, re = max(0, -r0), min(W, W - r0)
        if ps < pe and rs < re:
            out[ps:pe, rs:re] = x[ps + p0:pe + p0, rs + r0:re + r0]
        return out

    return ((1 - fa) * (1 - fb) * grab(0, 0)
            + (1 - fa) * fb * grab(0, 1)
            + fa * (1 - fb) * grab(1, 0)
            + fa * fb * grab(1, 1))


def fft2(x) -> np.ndarray:
    """Unitary 2-D DFT (1/sqrt(HW) both ways, so Parseval is symmetric)."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise NumericsError("fft2 expects a 2-D tensor")
    return np.fft.fft2(x, norm="ortho")


def ifft2(x) -> np.ndarray:
    """Inverse of :func:`fft2`."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise NumericsError("ifft2 expects a 2-D tensor")
    return np.fft.ifft2(x, norm="ortho")


def solve_spd(M, rhs) -> np.ndarray:
    """Solve M X = rhs for symmetric positive definite M via Cholesky.

    Raises SpdError on factorization breakdown, which is reported distinctly
    from a plain dimension mismatch (NumericsError).
    """
    M = as_tensor(M)
    rhs = as_tensor(rhs)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NumericsError(f"M must be square, got {M.shape}")
    if rhs.shape[0] != M.shape[0]:
        raise NumericsError(
            f"rhs leading dim {rhs.shape[0]} != system size {M.shape[0]}")
    try:
        c, low = scipy.linalg.cho_factor(M, check_finite=False)
    except scipy.linalg.LinAlgError as e:
        raise SpdError(f"matrix is not positive definite: {e}") from None
    return scipy.linalg.cho_solve((c, low), rhs, check_finite=False)


def pca_projection(X, m: int) -> np.ndarray:
    """Rows = m leading eigenvectors of the sample covariance of centered X.

    Orthonormal rows ordered by descending eigenvalue.  Sign convention: the
    largest-magnitude component of each eigenvector is made positive, so the
    projection is deterministic across LAPACK builds.
    """
    X = as_tensor(X)
    if X.ndim != 2:
        raise NumericsError("pca_projection expects an N x d sample matrix")
    N, d = X.shape
    if N < 2:
        raise NumericsError("need at least two samples")
    if m < 1 or m > min(N, d):
        raise NumericsError(f"m={m} out of range for {N}x{d} input")
    Xc = X - X.mean(axis=0)
    cov = (Xc.T @ Xc) / (N - 1)
    evals, evecs = np.linalg.eigh(cov)          # ascending
    evals, evecs = evals[::-1], evecs[:, ::-1]
    tol = max(evals[0], 0.0) * d * np.finfo(np.float64).eps
    rank = int(np.sum(evals > max(tol, 0.0)))
    if evals[0] <= 0.0:
        rank = 0
    if m > rank:
        raise NumericsError(
            f"requested {m} components but covariance rank is {rank}")
    A = evecs[:, :m].T.copy()
    for i in range(m):
        j = int(np.argmax(np.abs(A[i])))
        if A[i, j] < 0:
            A[i] = -A[i]
    return A
