"""Forward semantics of the network building blocks.

Layer types: operational 2-D layers whose taps apply a learned Q-term
polynomial to a per-neuron bilinearly shifted input stack, their transposed
(fractionally strided) counterpart, 2x2 max pooling, dense generative
polynomial layers (one polynomial per connection), and a grouped
average-pool + softmax classification head.

Each operational forward exists twice: a reference composition of the
numerics primitives (slow, obviously correct) and a fused kernel path used
everywhere else.  Tests pin the two together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .numerics import (NumericsError, as_tensor, bilinear_shift, check_finite,
                       conv2d_same, hadamard_pow)

__all__ = [
    "OperationalLayerParams",
    "SelfGOPParams",
    "apply_activation",
    "activation_grad",
    "operational_forward",
    "operational_forward_reference",
    "transposed_operational_forward",
    "upsample2_zero",
    "maxpool2",
    "selfgop_forward",
    "grouped_avgpool_softmax",
]

_ACTIVATIONS = ("tanh", "sigmoid", "none")


@dataclass
class OperationalLayerParams:
    """Per-neuron polynomial kernels, per-order biases, and kernel shifts.

    W: (C_out, C_in, Q, f, f) — tap coefficients of each polynomial order.
    b: (C_out, Q) — one bias per order per neuron (their sum enters the map).
    shifts: (C_out, 2) — real-valued (alpha, beta), shared across all input
    connections of a given output neuron.
    """

    W: np.ndarray
    b: np.ndarray
    shifts: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.W = as_tensor(self.W)
        self.b = as_tensor(self.b)
        self.shifts = as_tensor(self.shifts)
        if self.W.ndim != 5 or self.W.shape[3] != self.W.shape[4]:
            raise NumericsError(f"W must be (Cout, Cin, Q, f, f), got {self.W.shape}")
        cout, _, q, f, _ = self.W.shape
        if q < 1:
            raise NumericsError("Q must be >= 1")
        if f % 2 == 0:
            raise NumericsError("kernel size must be odd")
        if self.b.shape != (cout, q):
            raise NumericsError(f"b must be (Cout, Q)={cout, q}, got {self.b.shape}")
        if self.shifts.shape != (cout, 2):
            raise NumericsError(f"shifts must be (Cout, 2), got {self.shifts.shape}")
        if self.activation not in _ACTIVATIONS:
            raise NumericsError(f"unknown activation {self.activation!r}")

    @property
    def c_out(self) -> int:
        return self.W.shape[0]

    @property
    def c_in(self) -> int:
        return self.W.shape[1]

    @property
    def q_order(self) -> int:
        return self.W.shape[2]

    @property
    def ksize(self) -> int:
        return self.W.shape[3]


@dataclass
class SelfGOPParams:
    """Dense generative polynomial layer: out = act(sum_q W_q y^q + b_q).

    W: (Q, n, m), b: (Q, n) with expansion n > m (compressive front end
    mapping a measurement vector up to the ambient sparse dimension).
    """

    W: np.ndarray
    b: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        self.W = as_tensor(self.W)
        self.b = as_tensor(self.b)
        if self.W.ndim != 3:
            raise NumericsError(f"W must be (Q, n, m), got {self.W.shape}")
        q, n, m = self.W.shape
        if q < 1:
            raise NumericsError("Q must be >= 1")
        if n <= m:
            raise NumericsError(f"expansion required: n={n} must exceed m={m}")
        if self.b.shape != (q, n):
            raise NumericsError(f"b must be (Q, n)={q, n}, got {self.b.shape}")
        if self.activation not in _ACTIVATIONS:
            raise NumericsError(f"unknown activation {self.activation!r}")

    @property
    def q_order(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    @property
    def m_in(self) -> int:
        return self.W.shape[2]


def apply_activation(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "tanh":
        return np.tanh(z)
    if tag == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if tag == "none":
        return z
    raise NumericsError(f"unknown activation {tag!r}")


def activation_grad(y: np.ndarray, tag: str) -> np.ndarray:
    """d act / d z expressed through the activation output y."""
    if tag == "tanh":
        return 1.0 - y * y
    if tag == "sigmoid":
        return y * (1.0 - y)
    if tag == "none":
        return np.ones_like(y)
    raise NumericsError(f"unknown activation {tag!r}")


def _check_op_input(x: np.ndarray, p: OperationalLayerParams) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 3:
        raise NumericsError(f"expected (C, H, W) input, got shape {x.shape}")
    if x.shape[0] != p.c_in:
        raise NumericsError(
            f"channel mismatch: input has {x.shape[0]}, layer expects {p.c_in}")
    check_finite(p.W, "layer weights")
    check_finite(p.b, "layer biases")
    check_finite(p.shifts, "layer shifts")
    return x


def operational_forward(x, p: OperationalLayerParams,
                        return_pre: bool = False):
    """Operational layer forward pass (fused kernel path).

    For each output neuron k: shift the whole input stack by (alpha_k,
    beta_k), raise to Hadamard powers 1..Q, accumulate the same-padded
    correlations with W[k], add sum_q b[k, q], apply the activation.
    """
    x = _check_op_input(x, p)
    if p.ksize != 3:
        z = _op_forward_general(x, p)
    else:
        z = _kernels.op_forward(x, p.W, p.b, p.shifts)
    y = apply_activation(z, p.activation)
    if return_pre:
        return y, z
    return y


def _op_forward_general(x: np.ndarray, p: OperationalLayerParams) -> np.ndarray:
    """Any-kernel-size fallback via the numerics primitives."""
    cout = p.c_out
    H, W = x.shape[1], x.shape[2]
    z = np.zeros((cout, H, W))
    for k in range(cout):
        alpha, beta = p.shifts[k]
        acc = np.zeros((H, W))
        for c in range(p.c_in):
            xt = bilinear_shift(x[c], alpha, beta)
            for q in range(1, p.q_order + 1):
                acc += conv2d_same(hadamard_pow(xt, q), p.W[k, c, q - 1])
        z[k] = acc + p.b[k].sum()
    return z


def operational_forward_reference(x, p: OperationalLayerParams) -> np.ndarray:
    """Slow composed-primitives reference of :func:`operational_forward`."""
    x = _check_op_input(x, p)
    return apply_activation(_op_forward_general(x, p), p.activation)


def upsample2_zero(x: np.ndarray) -> np.ndarray:
    """Zero-interleaved 2x upsampling: x lands on the even grid positions."""
    x = as_tensor(x)
    C, H, W = x.shape
    up = np.zeros((C, 2 * H, 2 * W))
    up[:, ::2, ::2] = x
    return up


def transposed_operational_forward(x, p: OperationalLayerParams, stride: int = 2,
                                   return_pre: bool = False):
    """Fractionally-strided operational layer: zero-upsample then apply.

    Doubles both spatial extents (stride fixed at 2)."""
    if stride != 2:
        raise NumericsError("only stride 2 is supported")
    x = _check_op_input(x, p)
    return operational_forward(upsample2_zero(x), p, return_pre=return_pre)


def maxpool2(x):
    """Non-overlapping 2x2 max pool; returns (pooled, argmax indices).

    Indices are flat positions into each 2x2 block in row-major order
    (first occurrence wins ties), kept for the backward routing.
    """
    x = as_tensor(x)
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise NumericsError(f"maxpool2 requires even extents, got {H}x{W}")
    blocks = x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4)
    flat = blocks.reshape(C, H // 2, W // 2, 4)
    idx = np.argmax(flat, axis=3)
    pooled = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]
    return pooled, idx.astype(np.int64)


def maxpool2_backward(g, idx, shape):
    """Scatter pooled gradients back to the argmax positions."""
    C, H, W = shape
    dx = np.zeros((C, H, W))
    gi, gp, gr = np.meshgrid(np.arange(C), np.arange(H // 2), np.arange(W // 2),
                             indexing="ij")
    dp = idx // 2
    dr = idx % 2
    dx[gi, 2 * gp + dp, 2 * gr + dr] = g
    return dx


def selfgop_forward(y, p: SelfGOPParams, return_pre: bool = False):
    """Dense polynomial expansion layer: sum_q W_q (y^q) + b_q, activated."""
    y = as_tensor(y)
    if y.ndim != 1 or y.shape[0] != p.m_in:
        raise NumericsError(
            f"input length {y.shape} does not match layer m={p.m_in}")
    z = np.zeros(p.n_out)
    yq = np.ones_like(y)
    for q in range(p.q_order):
        yq = yq * y
        z += p.W[q] @ yq + p.b[q]
    out = apply_activation(z, p.activation)
    if return_pre:
        return out, z
    return out


def grouped_avgpool_softmax(v, group) -> np.ndarray:
    """Average-pool non-overlapping (g_h, g_w) blocks, flatten row-major,
    softmax.  Output is a class-probability vector, one entry per block."""
    v = as_tensor(v)
    if v.ndim != 2:
        raise NumericsError("expected a 2-D map")
    g_h, g_w = int(group[0]), int(group[1])
    H, W = v.shape
    if g_h < 1 or g_w < 1 or H % g_h or W % g_w:
        raise NumericsError(
            f"group {g_h}x{g_w} does not tile a {H}x{W} map")
    pooled = v.reshape(H // g_h, g_h, W // g_w, g_w).mean(axis=(1, 3))
    logits = pooled.reshape(-1)
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()
