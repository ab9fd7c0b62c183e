"""Reverse-mode training machinery for operational layer graphs.

The graph is an ordered list of :class:`LayerNode` records walked top to
bottom by the forward pass and bottom to top by the backward pass.  Three
loss functions are provided (plain masked MSE, MSE with a group-sparsity
penalty, and an MSE + cross-entropy hybrid for models with a
classification side head), together with a bias-corrected Adam optimizer
and a finite-difference gradient checker.

Gradients are exact reverse-mode derivatives of the batch-summed loss,
including the paths through the bilinear shift interpolation and the
Hadamard powers.  Everything here is single-threaded and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .layers import (
    OperationalLayerParams,
    SelfGOPParams,
    activation_grad,
    grouped_avgpool_softmax,
    maxpool2,
    maxpool2_backward,
    operational_forward,
    selfgop_forward,
    upsample2_zero,
)
from .numerics import NumericsError, as_tensor

_LOG_CLAMP = 1e-12
_NODE_KINDS = ("op", "op_t", "pool", "gop", "reshape")
_LOSS_KINDS = ("mse_mask", "group_l2", "hybrid")


# ---------------------------------------------------------------------------
# graph description


@dataclass(eq=False)
class LayerNode:
    """One vertex of the feed-forward graph.

    kind:
        ``op``       operational layer (``OperationalLayerParams``)
        ``op_t``     fractionally-strided operational layer, stride 2
        ``pool``     non-overlapping 2x2 max pool (parameter-free)
        ``gop``      dense polynomial expansion (``SelfGOPParams``)
        ``reshape``  vector -> (1, H, W) image adapter (``shape`` required)

    ``shift_bound`` is the clamp radius applied to this layer's shift
    parameters after each optimizer step (half the smaller spatial extent
    of the map the layer operates on).
    """

    kind: str
    params: object = None
    shape: Optional[Tuple[int, int]] = None
    shift_bound: Optional[float] = None

    def __post_init__(self):
        if self.kind not in _NODE_KINDS:
            raise NumericsError(f"unknown node kind {self.kind!r}")
        if self.kind in ("op", "op_t"):
            if not isinstance(self.params, OperationalLayerParams):
                raise NumericsError(
                    f"{self.kind} node needs OperationalLayerParams")
        elif self.kind == "gop":
            if not isinstance(self.params, SelfGOPParams):
                raise NumericsError("gop node needs SelfGOPParams")
        else:
            if self.params is not None:
                raise NumericsError(f"{self.kind} node takes no parameters")
        if self.kind == "reshape":
            if self.shape is None or len(self.shape) != 2:
                raise NumericsError("reshape node needs a (H, W) shape")


def _model_parts(model):
    """Accept a model object (``nodes``/``head``/``group`` attributes) or a
    bare node list; normalize to (nodes, head, group)."""
    if isinstance(model, (list, tuple)):
        return list(model), "segmentation", None
    nodes = getattr(model, "nodes", None)
    if nodes is None:
        raise NumericsError("model must provide a .nodes layer list")
    head = getattr(model, "head", "segmentation")
    group = getattr(model, "group", None)
    return list(nodes), head, group


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossSpec:
    """Selects the training objective.

    ``class_groups`` (for ``group_l2``) is a list of integer index arrays
    partitioning the flattened output map into per-class blocks.
    """

    kind: str = "mse_mask"
    lambda_g: float = 0.01
    lambda_c: float = 0.1
    class_groups: Optional[Sequence[np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in _LOSS_KINDS:
            raise NumericsError(f"unknown loss kind {self.kind!r}")
        if self.lambda_g < 0 or self.lambda_c < 0:
            raise NumericsError("loss weights must be non-negative")
        if self.kind == "group_l2" and self.class_groups is None:
            raise NumericsError("group_l2 loss needs class_groups")


def _flat_pair(v_hat, v):
    v_hat = np.asarray(v_hat, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if v_hat.shape != v.shape:
        raise NumericsError(
            f"prediction/target length mismatch: {v_hat.size} vs {v.size}")
    return v_hat, v


def loss_mse_mask(v_hat, v) -> float:
    """Sum of squared differences ||v_hat - v||_2^2."""
    v_hat, v = _flat_pair(v_hat, v)
    d = v_hat - v
    return float(d @ d)


def _check_partition(groups, n):
    allidx = np.concatenate([np.asarray(g, dtype=np.int64).ravel()
                             for g in groups]) if len(groups) else np.empty(0, np.int64)
    if allidx.size != n or not np.array_equal(np.sort(allidx), np.arange(n)):
        raise NumericsError("class_groups must partition the output indices")


def loss_group_l2(v_hat, v, groups, lambda_g) -> float:
    """MSE plus lambda_g times the sum of per-group l2 norms of v_hat."""
    v_hat, v = _flat_pair(v_hat, v)
    _check_partition(groups, v_hat.size)
    d = v_hat - v
    penalty = sum(float(np.linalg.norm(v_hat[np.asarray(g, dtype=np.int64)]))
                  for g in groups)
    return float(d @ d) + float(lambda_g) * penalty


def loss_hybrid(v_hat, v, c_hat, c, lambda_c) -> float:
    """MSE on the map plus lambda_c times cross-entropy on the class head.

    Probabilities are clamped at 1e-12 before the log so an exactly-zero
    predicted probability at the true class stays finite.
    """
    v_hat, v = _flat_pair(v_hat, v)
    c_hat = np.asarray(c_hat, dtype=np.float64).ravel()
    c = np.asarray(c, dtype=np.float64).ravel()
    if c_hat.shape != c.shape:
        raise NumericsError("class probability/label length mismatch")
    d = v_hat - v
    ce = -float(c @ np.log(np.maximum(c_hat, _LOG_CLAMP)))
    return float(d @ d) + float(lambda_c) * ce


def _dloss_map(v_hat, v, loss: LossSpec) -> np.ndarray:
    """Gradient of the map-dependent loss terms with respect to v_hat."""
    g = 2.0 * (v_hat - v)
    if loss.kind == "group_l2":
        for idx in loss.class_groups:
            idx = np.asarray(idx, dtype=np.int64)
            nrm = float(np.linalg.norm(v_hat[idx]))
            if nrm > 0.0:
                g[idx] += loss.lambda_g * v_hat[idx] / nrm
    return g


def _dce_logits(c_hat, c) -> np.ndarray:
    """Cross-entropy gradient pulled back through the softmax to its logits."""
    p = np.maximum(c_hat, _LOG_CLAMP)
    dchat = np.where(c_hat > _LOG_CLAMP, -c / p, 0.0)
    return c_hat * (dchat - float(c_hat @ dchat))


def _sample_loss_and_dmap(v_map, c_hat, sample, loss: LossSpec):
    """Per-sample loss value, map gradient, and class-logit gradient."""
    v_hat = v_map.ravel()
    if loss.kind == "hybrid":
        x, v, c = sample
        value = loss_hybrid(v_hat, v, c_hat, c, loss.lambda_c)
        dmap = _dloss_map(v_hat, np.asarray(v, dtype=np.float64).ravel(), loss)
        dlogits = loss.lambda_c * _dce_logits(
            np.asarray(c_hat, dtype=np.float64),
            np.asarray(c, dtype=np.float64).ravel())
        return value, dmap, dlogits
    x, v = sample
    v_flat = np.asarray(v, dtype=np.float64).ravel()
    if loss.kind == "group_l2":
        value = loss_group_l2(v_hat, v_flat, loss.class_groups, loss.lambda_g)
    else:
        value = loss_mse_mask(v_hat, v_flat)
    return value, _dloss_map(v_hat, v_flat, loss), None


# ---------------------------------------------------------------------------
# forward with cache


def forward_cached(nodes: List[LayerNode], x, head: str = "segmentation",
                   group=None):
    """Run the graph on one sample, recording what backward needs.

    Returns ``(v_map, c_hat, cache)`` where ``v_map`` is the final
    activation map with the leading singleton channel removed, and
    ``c_hat`` is the grouped-softmax class vector (``None`` unless
    ``head`` involves classification).
    """
    a = as_tensor(x)
    cache = []
    for i, node in enumerate(nodes):
        if node.kind == "op":
            y, z = operational_forward(a, node.params, return_pre=True)
            cache.append({"x": a, "y": y, "z": z})
            a = y
        elif node.kind == "op_t":
            x_up = upsample2_zero(a)
            y, z = operational_forward(x_up, node.params, return_pre=True)
            cache.append({"x_up": x_up, "y": y, "z": z})
            a = y
        elif node.kind == "pool":
            y, idx = maxpool2(a)
            cache.append({"idx": idx, "in_shape": a.shape})
            a = y
        elif node.kind == "gop":
            y, z = selfgop_forward(a, node.params, return_pre=True)
            cache.append({"x": a, "y": y, "z": z})
            a = y
        else:  # reshape
            cache.append({"in_shape": a.shape})
            a = np.ascontiguousarray(a).reshape((1,) + tuple(node.shape))
        if not np.all(np.isfinite(a)):
            raise NumericsError(
                f"non-finite output at node {i} ({node.kind})")
    if a.ndim != 3:
        raise NumericsError(
            f"graph must end in a channel map, got shape {a.shape}")
    v_map = a[0] if a.shape[0] == 1 else a
    c_hat = None
    if head in ("classification", "hybrid") and group is not None:
        if a.shape[0] != 1:
            raise NumericsError("class heads need a single-channel map")
        z_out = cache[-1]["z"][0]
        c_hat = grouped_avgpool_softmax(z_out, group)
    return v_map, c_hat, cache


def forward(nodes, x, head: str = "segmentation", group=None):
    """Forward pass without the cache; returns (v_map, c_hat)."""
    v_map, c_hat, _ = forward_cached(nodes, x, head, group)
    return v_map, c_hat


# ---------------------------------------------------------------------------
# gradients


@dataclass
class GradRecord:
    """Per-layer gradient buffers (None for parameter-free nodes)."""

    dW: np.ndarray
    db: np.ndarray
    dshifts: Optional[np.ndarray] = None


def zero_grads(nodes: List[LayerNode]):
    """Gradient buffers shaped like each node's parameters."""
    out = []
    for node in nodes:
        if node.kind in ("op", "op_t"):
            p = node.params
            out.append(GradRecord(np.zeros_like(p.W), np.zeros_like(p.b),
                                  np.zeros_like(p.shifts)))
        elif node.kind == "gop":
            p = node.params
            out.append(GradRecord(np.zeros_like(p.W), np.zeros_like(p.b)))
        else:
            out.append(None)
    return out


def _backward_graph(nodes, cache, d_map, d_logits, group, grads):
    """Accumulate one sample's parameter gradients.

    ``d_map`` is dL/d(final activation map), flattened; ``d_logits`` is the
    optional gradient on the grouped-pool class logits (hybrid head).
    """
    last = len(nodes) - 1
    y_out = cache[last]["y"]
    da = d_map.reshape(y_out.shape)
    for i in range(last, -1, -1):
        node, rec = nodes[i], cache[i]
        if node.kind in ("op", "op_t"):
            p = node.params
            dz = da * activation_grad(rec["y"], p.activation)
            if i == last and d_logits is not None:
                g_h, g_w = int(group[0]), int(group[1])
                H, W = rec["z"].shape[1], rec["z"].shape[2]
                dpool = d_logits.reshape(H // g_h, W // g_w)
                spread = np.repeat(np.repeat(dpool, g_h, axis=0), g_w, axis=1)
                dz = dz + (spread / (g_h * g_w))[None]
            dz = np.ascontiguousarray(dz)
            g = grads[i]
            if node.kind == "op_t":
                x_in = rec["x_up"]
                need_dx = i > 0
                dx = np.zeros(x_in.shape) if need_dx else None
                _kernels.op_backward(x_in, p.W, p.shifts, dz, need_dx,
                                     g.dW, g.db, g.dshifts, dx)
                da = dx[:, ::2, ::2] if need_dx else None
            else:
                x_in = rec["x"]
                need_dx = i > 0
                dx = np.zeros(x_in.shape) if need_dx else None
                _kernels.op_backward(x_in, p.W, p.shifts, dz, need_dx,
                                     g.dW, g.db, g.dshifts, dx)
                da = dx
        elif node.kind == "pool":
            da = maxpool2_backward(da, rec["idx"], rec["in_shape"])
        elif node.kind == "gop":
            p = node.params
            dz = da * activation_grad(rec["y"], p.activation)
            y_in = rec["x"]
            g = grads[i]
            dy = np.zeros_like(y_in) if i > 0 else None
            yq = np.ones_like(y_in)
            for q in range(p.q_order):
                yprev = yq           # y^q
                yq = yq * y_in       # y^(q+1), matching the forward order
                g.dW[q] += np.outer(dz, yq)
                g.db[q] += dz
                if dy is not None:
                    dy += (p.W[q].T @ dz) * ((q + 1) * yprev)
            da = dy
        else:  # reshape
            da = da.reshape(rec["in_shape"])


def backward(model, batch: Iterable, loss: LossSpec):
    """Gradients of the batch-summed loss for every parameter tensor.

    ``batch`` yields ``(x, v)`` pairs, or ``(x, v, c)`` triples for the
    hybrid loss (``c`` one-hot).  Returns ``(grads, total_loss)`` with
    ``grads`` parallel to the node list.
    """
    nodes, head, group = _model_parts(model)
    if loss.kind == "hybrid" and head not in ("hybrid", "classification"):
        raise NumericsError("hybrid loss needs a model with a class head")
    grads = zero_grads(nodes)
    total = 0.0
    for sample in batch:
        x = sample[0]
        v_map, c_hat, cache = forward_cached(nodes, x, head, group)
        value, dmap, dlogits = _sample_loss_and_dmap(v_map, c_hat, sample, loss)
        total += value
        _backward_graph(nodes, cache, dmap, dlogits, group, grads)
    return grads, float(total)


def batch_loss(model, batch: Iterable, loss: LossSpec) -> float:
    """Forward-only batch-summed loss (no gradients)."""
    nodes, head, group = _model_parts(model)
    total = 0.0
    for sample in batch:
        v_map, c_hat, _ = forward_cached(nodes, sample[0], head, group)
        value, _, _ = _sample_loss_and_dmap(v_map, c_hat, sample, loss)
        total += value
    return float(total)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Bias-corrected Adam state; moment lists parallel the parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def _param_leaves(nodes):
    """Ordered (node, attribute) pairs over every trainable tensor."""
    leaves = []
    for node in nodes:
        if node.kind in ("op", "op_t"):
            leaves += [(node, "W"), (node, "b"), (node, "shifts")]
        elif node.kind == "gop":
            leaves += [(node, "W"), (node, "b")]
    return leaves


def _grad_leaves(nodes, grads):
    out = []
    for node, g in zip(nodes, grads):
        if node.kind in ("op", "op_t"):
            out += [g.dW, g.db, g.dshifts]
        elif node.kind == "gop":
            out += [g.dW, g.db]
    return out


def init_adam(nodes, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for node, attr in _param_leaves(nodes):
        arr = getattr(node.params, attr)
        state.m.append(np.zeros_like(arr))
        state.v.append(np.zeros_like(arr))
    return state


def adam_step(nodes, grads, state: AdamState):
    """One in-place Adam update; shifts are clamped to each node's bound.

    Returns ``(nodes, state)``; both are modified in place.
    """
    leaves = _param_leaves(nodes)
    gleaves = _grad_leaves(nodes, grads)
    if len(state.m) != len(leaves):
        raise NumericsError("optimizer state does not match the model")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for (node, attr), g, m, v in zip(leaves, gleaves, state.m, state.v):
        arr = getattr(node.params, attr)
        if g.shape != arr.shape:
            raise NumericsError(
                f"gradient shape {g.shape} does not match {attr} {arr.shape}")
        if m.shape != arr.shape:
            raise NumericsError("optimizer state does not match the model")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for node in nodes:
        if node.kind in ("op", "op_t") and node.shift_bound is not None:
            np.clip(node.params.shifts, -node.shift_bound, node.shift_bound,
                    out=node.params.shifts)
    return nodes, state


# ---------------------------------------------------------------------------
# initialization policy


def init_operational_params(c_out: int, c_in: int, q: int, ksize: int = 3,
                            activation: str = "tanh",
                            rng: Optional[np.random.Generator] = None
                            ) -> OperationalLayerParams:
    """Fan-in-scaled uniform kernel init; zero shifts and biases.

    Coefficient variance is 1/(fan_in*Q) with fan_in = c_in*ksize^2, i.e.
    uniform on +-sqrt(3/(fan_in*Q)); zero shifts start the model at its
    localized (unshifted) configuration.
    """
    rng = np.random.default_rng() if rng is None else rng
    bound = np.sqrt(3.0 / (c_in * ksize * ksize * q))
    W = rng.uniform(-bound, bound, size=(c_out, c_in, q, ksize, ksize))
    return OperationalLayerParams(W=W, b=np.zeros((c_out, q)),
                                  shifts=np.zeros((c_out, 2)),
                                  activation=activation)


def init_selfgop_params(n: int, m: int, q: int, activation: str = "none",
                        rng: Optional[np.random.Generator] = None
                        ) -> SelfGOPParams:
    """Fan-in-scaled uniform init for the dense expansion layer."""
    rng = np.random.default_rng() if rng is None else rng
    bound = np.sqrt(3.0 / (m * q))
    W = rng.uniform(-bound, bound, size=(q, n, m))
    return SelfGOPParams(W=W, b=np.zeros((q, n)), activation=activation)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Finite-difference audit: worst relative error and any violations."""

    n_checked: int
    max_rel_err: float
    violations: List[Tuple[str, float]]

    @property
    def passed(self) -> bool:
        return not self.violations


def grad_check(model, batch, loss: LossSpec, h: float = 1e-4,
               tol: float = 1e-5, sample: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Every parameter entry is perturbed by +-h (or, when ``sample`` is
    given, a deterministic random subset of that size per tensor).
    Relative error is |analytic - numeric| / max(|analytic|, |numeric|,
    1e-8); entries above ``tol`` are reported.  Shift parameters should
    sit away from the integer lattice where the bilinear interpolation
    has kinks.
    """
    nodes, _, _ = _model_parts(model)
    grads, _ = backward(model, batch, loss)
    gleaves = _grad_leaves(nodes, grads)
    rng = np.random.default_rng(seed)
    violations = []
    n_checked = 0
    max_rel = 0.0
    node_pos = {id(node): i for i, node in enumerate(nodes)}
    for (node, attr), g in zip(_param_leaves(nodes), gleaves):
        arr = getattr(node.params, attr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        if sample is not None and flat.size > sample:
            idxs = np.sort(rng.choice(flat.size, size=sample, replace=False))
        else:
            idxs = np.arange(flat.size)
        label = f"node{node_pos[id(node)]}.{attr}"
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = batch_loss(model, batch, loss)
            flat[i] = orig - h
            lm = batch_loss(model, batch, loss)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            analytic = gflat[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric),
                                                1e-8)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
            if rel > tol:
                violations.append((f"{label}[{i}]", float(rel)))
    return GradCheckReport(n_checked=n_checked, max_rel_err=float(max_rel),
                           violations=violations)
