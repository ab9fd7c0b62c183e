"""Sparse-sensing problem setup, proxies, baselines, and evaluation metrics.

A sensing problem bundles the measurement matrix with its equivalent
dictionary and (lazily) a linear denoiser used both as the classical
estimate and as the init of measurement-input networks.  Evaluation
covers binary support metrics (with macro-averaging), PSNR/NMSE,
a collaborative-representation classifier, and a reference iterative
shrinkage solver for the l1 problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .numerics import NumericsError, as_tensor, solve_spd

PhiSpec = Union[str, np.ndarray]


@dataclass(eq=False)
class SensingProblem:
    """Measurement operator y = D x (+ noise) over a sparse x.

    ``phi`` tags the sparsifying domain: ``"identity"`` (D = A),
    ``"gradient"`` (support lives in the image-gradient domain; D = A),
    or an explicit (d, n) matrix with D = A @ phi.  ``B`` holds the most
    recently computed denoiser; per-(kind, lambda) denoisers are cached.
    """

    A: np.ndarray
    phi: PhiSpec = "identity"
    D: np.ndarray = None
    B: Optional[np.ndarray] = None
    mr: float = 0.0
    _bcache: Dict[tuple, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.A = as_tensor(self.A)
        if self.A.ndim != 2:
            raise NumericsError("measurement matrix must be 2-D")
        if isinstance(self.phi, str):
            if self.phi not in ("identity", "gradient"):
                raise NumericsError(f"unknown sparsifying tag {self.phi!r}")
            if self.D is None:
                self.D = self.A
        else:
            self.phi = as_tensor(self.phi)
            if self.phi.shape[0] != self.A.shape[1]:
                raise NumericsError(
                    f"measurement/sparsifier mismatch: A is {self.A.shape}, "
                    f"phi is {self.phi.shape}")
            if self.D is None:
                self.D = self.A @ self.phi
        m, n = self.D.shape
        if m >= n:
            raise NumericsError(
                f"underdetermined problem required: m={m} must be < n={n}")
        self.mr = m / n

    @property
    def m(self) -> int:
        return self.D.shape[0]

    @property
    def n(self) -> int:
        return self.D.shape[1]


def gaussian_measurement_matrix(m: int, n: int, seed: int) -> np.ndarray:
    """i.i.d. N(0, 1/m) matrix, deterministic per seed; requires m < n."""
    if m >= n:
        raise NumericsError(f"need m < n, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, n))


def denoiser_matrix(problem: SensingProblem, kind: str = "mc",
                    lam: float = 1e-2) -> np.ndarray:
    """The (n, m) linear estimator behind :func:`proxy`, cached per problem.

    ``mc`` is the matched filter D^T; ``lmmse`` is the regularized
    pseudo-inverse (D^T D + lam I)^{-1} D^T computed by a Cholesky solve.
    """
    if kind == "mc":
        key = ("mc",)
    elif kind == "lmmse":
        key = ("lmmse", float(lam))
    else:
        raise NumericsError(f"unknown proxy kind {kind!r}")
    cached = problem._bcache.get(key)
    if cached is None:
        D = problem.D
        if kind == "mc":
            cached = D.T.copy()
        else:
            n = D.shape[1]
            gram = D.T @ D + float(lam) * np.eye(n)
            cached = solve_spd(gram, D.T)
        problem._bcache[key] = cached
    problem.B = cached
    return cached


def proxy(problem: SensingProblem, y, kind: str = "mc",
          lam: float = 1e-2) -> np.ndarray:
    """Coarse linear estimate x_tilde = B y of the sparse signal."""
    y = as_tensor(y)
    if y.shape != (problem.m,):
        raise NumericsError(
            f"measurement length {y.shape} does not match m={problem.m}")
    return denoiser_matrix(problem, kind, lam) @ y


def support_mask_from_signal(x, tau: float = 0.0) -> np.ndarray:
    """Binary mask of entries with |x_i| strictly above tau."""
    if tau < 0:
        raise NumericsError("threshold must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    return (np.abs(x) > tau).astype(np.float64)


def add_measurement_noise(y, snr_db: float, seed: int) -> np.ndarray:
    """Additive Gaussian noise rescaled to hit the requested SNR exactly.

    The drawn noise vector is scaled so 10*log10(||y||^2/||z||^2) equals
    ``snr_db`` for this very sample; ``inf`` returns y unchanged.
    """
    y = as_tensor(y)
    if np.isinf(snr_db):
        return y.copy()
    energy = float(y @ y) if y.ndim == 1 else float(np.sum(y * y))
    if energy == 0.0:
        raise NumericsError("cannot set an SNR against a zero measurement")
    rng = np.random.default_rng(seed)
    z = rng.normal(size=y.shape)
    z_energy = float(np.sum(z * z))
    target = energy * 10.0 ** (-snr_db / 10.0)
    z *= np.sqrt(target / z_energy)
    return y + z


@dataclass
class SeMetrics:
    """Binary support-recovery scores; zero-denominator cases score 0."""

    precision: float
    specificity: float
    sensitivity: float
    f1: float
    f2: float
    accuracy: float

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "specificity": self.specificity,
            "sensitivity": self.sensitivity,
            "f1": self.f1,
            "f2": self.f2,
            "accuracy": self.accuracy,
        }


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def se_metrics(v, v_hat) -> SeMetrics:
    """Confusion-matrix scores of a binary support estimate against truth."""
    v = np.asarray(v, dtype=np.float64).ravel()
    v_hat = np.asarray(v_hat, dtype=np.float64).ravel()
    if v.shape != v_hat.shape:
        raise NumericsError(
            f"mask length mismatch: {v.size} vs {v_hat.size}")
    t = v > 0.5
    p = v_hat > 0.5
    tp = float(np.sum(t & p))
    tn = float(np.sum(~t & ~p))
    fp = float(np.sum(~t & p))
    fn = float(np.sum(t & ~p))
    precision = _safe_div(tp, tp + fp)
    specificity = _safe_div(tn, tn + fp)
    sensitivity = _safe_div(tp, tp + fn)
    f1 = _safe_div(2.0 * precision * sensitivity, precision + sensitivity)
    f2 = _safe_div(5.0 * precision * sensitivity,
                   4.0 * precision + sensitivity)
    accuracy = _safe_div(tp + tn, tp + tn + fp + fn)
    return SeMetrics(precision, specificity, sensitivity, f1, f2, accuracy)


def macro_average(metrics: Sequence[SeMetrics]) -> SeMetrics:
    """Mean of per-sample metrics (macro averaging)."""
    if not metrics:
        raise NumericsError("nothing to average")
    keys = ("precision", "specificity", "sensitivity", "f1", "f2", "accuracy")
    means = {k: float(np.mean([getattr(m, k) for m in metrics])) for k in keys}
    return SeMetrics(**means)


def psnr_nmse(ref, est, peak: float = 1.0) -> Tuple[float, float]:
    """Peak SNR (dB) and normalized MSE; identical inputs give (inf, 0)."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise NumericsError(
            f"shape mismatch: {ref.shape} vs {est.shape}")
    if peak <= 0:
        raise NumericsError("peak must be positive")
    err = float(np.sum((ref - est) ** 2))
    ref_energy = float(np.sum(ref * ref))
    if ref_energy == 0.0:
        raise NumericsError("zero reference has no normalized error")
    if err == 0.0:
        return float("inf"), 0.0
    psnr = 10.0 * np.log10(peak * peak * ref.size / err)
    return float(psnr), err / ref_energy


def crc_classify(D, y, lam: float, groups: Sequence[np.ndarray]
                 ) -> Tuple[int, np.ndarray]:
    """Collaborative-representation classification by class residuals.

    Solves the ridge system x_hat = (D^T D + lam I)^{-1} D^T y once, then
    scores each class by the residual of reconstructing y from its own
    columns alone; smallest residual wins (ties to the lowest index).
    Dictionary columns and the query must be unit-normalized.
    """
    D = as_tensor(D)
    y = as_tensor(y)
    col_norms = np.linalg.norm(D, axis=0)
    if np.max(np.abs(col_norms - 1.0)) > 1e-6:
        raise NumericsError("dictionary columns must be unit-normalized")
    if abs(np.linalg.norm(y) - 1.0) > 1e-6:
        raise NumericsError("query must be unit-normalized")
    n = D.shape[1]
    gram = D.T @ D + float(lam) * np.eye(n)
    x_hat = solve_spd(gram, D.T @ y)
    residuals = np.empty(len(groups))
    for i, g in enumerate(groups):
        g = np.asarray(g, dtype=np.int64)
        residuals[i] = np.linalg.norm(y - D[:, g] @ x_hat[g])
    return int(np.argmin(residuals)), residuals


def _power_iteration_l(D: np.ndarray, iters: int = 200,
                       tol: float = 1e-12) -> float:
    """Largest eigenvalue of D^T D by deterministic power iteration."""
    n = D.shape[1]
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(iters):
        w = D.T @ (D @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        lam_new = float(v_new @ (D.T @ (D @ v_new)))
        if abs(lam_new - lam) <= tol * max(lam_new, 1.0):
            return lam_new
        v, lam = v_new, lam_new
    return lam


def ista_lasso(D, y, lam: float, iters: int = 500) -> np.ndarray:
    """Iterative shrinkage-thresholding for ||Dx - y||_2^2 + lam*||x||_1.

    Step size comes from the largest eigenvalue of D^T D (power
    iteration); the objective is checked to be non-increasing and any
    rise beyond 1e-9 is treated as a step-size bug.
    """
    D = as_tensor(D)
    y = as_tensor(y)
    L = _power_iteration_l(D) * (1.0 + 1e-9)
    if L == 0.0:
        return np.zeros(D.shape[1])
    x = np.zeros(D.shape[1])
    resid = D @ x - y
    obj = float(resid @ resid) + lam * float(np.abs(x).sum())
    thresh = lam / (2.0 * L)
    for _ in range(int(iters)):
        grad = D.T @ resid
        x_new = x - grad / L
        x_new = np.sign(x_new) * np.maximum(np.abs(x_new) - thresh, 0.0)
        resid = D @ x_new - y
        obj_new = float(resid @ resid) + lam * float(np.abs(x_new).sum())
        if obj_new > obj + 1e-9:
            raise NumericsError(
                "objective increased: shrinkage step size is wrong")
        x, obj = x_new, obj_new
    return x


def build_classification_dictionary(samples, labels, A,
                                    block_shape: Tuple[int, int],
                                    grid_shape: Optional[Tuple[int, int]] = None):
    """Projected, normalized class dictionary laid out as a block mosaic.

    ``samples`` is (N, d_raw) with ``labels`` of length N and equal
    per-class counts matching ``block_shape``; ``A`` is the (m, d_raw)
    projection.  Columns are ordered so that reshaping a length-n vector
    to the returned 2-D extents puts every class in its own contiguous
    ``block_shape`` rectangle.  Returns ``(D, groups, map_shape)`` where
    ``groups[c]`` lists class c's flat indices in that layout.
    """
    samples = as_tensor(samples)
    labels = np.asarray(labels)
    A = as_tensor(A)
    if samples.ndim != 2 or samples.shape[0] != labels.shape[0]:
        raise NumericsError("samples/labels disagree")
    classes = np.unique(labels)
    n_classes = len(classes)
    g_h, g_w = int(block_shape[0]), int(block_shape[1])
    per_class = g_h * g_w
    by_class = []
    for c in classes:
        rows = np.flatnonzero(labels == c)
        if len(rows) != per_class:
            raise NumericsError(
                f"class {c!r} has {len(rows)} samples; the {g_h}x{g_w} "
                f"block needs exactly {per_class}")
        by_class.append(rows)
    if grid_shape is None:
        best = None
        for r in range(1, n_classes + 1):
            if n_classes % r:
                continue
            c = n_classes // r
            H, W = r * g_h, c * g_w
            aspect = max(H, W) / min(H, W)
            if best is None or aspect < best[0]:
                best = (aspect, (r, c))
        grid_shape = best[1]
    gr, gc = int(grid_shape[0]), int(grid_shape[1])
    if gr * gc != n_classes:
        raise NumericsError(
            f"grid {gr}x{gc} does not hold {n_classes} classes")
    H2, W2 = gr * g_h, gc * g_w
    n = H2 * W2
    feats = samples @ A.T
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise NumericsError("a projected sample is identically zero")
    feats = feats / norms[:, None]
    D = np.empty((A.shape[0], n))
    groups = [np.empty(per_class, dtype=np.int64) for _ in range(n_classes)]
    for p in range(n):
        row, col = divmod(p, W2)
        cls = (row // g_h) * gc + (col // g_w)
        atom = (row % g_h) * g_w + (col % g_w)
        D[:, p] = feats[by_class[cls][atom]]
        groups[cls][atom] = p
    for g in groups:
        g.sort()
    return D, groups, (H2, W2)
