"""Model assembly, training orchestration, inference, and persistence.

Two segmentation-style architectures are provided.  The compact variant
chains three operational layers (1 -> 48 -> 24 -> 1, 3x3 kernels); the
encoder-decoder variant inserts a 2x2 max pool after the first hidden
layer and recovers resolution with a stride-2 transposed operational
layer before the output.  Either can be prefixed with a dense polynomial
expansion layer that maps a raw measurement vector straight to the image
grid, initialized so the untrained network reproduces a given linear
denoiser exactly.
"""

from __future__ import annotations

import copy
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .layers import SelfGOPParams
from .numerics import NumericsError, as_tensor
from .training import (
    AdamState,
    LayerNode,
    LossSpec,
    adam_step,
    backward,
    forward,
    init_adam,
    init_operational_params,
    zero_grads,
)

_VARIANTS = ("osen1", "osen2")
_HEADS = ("segmentation", "classification", "hybrid")

_MAGIC = b"OSEN"
_FORMAT_VERSION = 1


@dataclass
class ModelSpec:
    """Architecture selector.

    ``input_shape`` is the spatial extent of the support map.  With
    ``ncl`` the network input is instead a length-``m`` measurement
    vector expanded onto that grid by the front-end layer.  ``group``
    gives the class-block shape of the output map for the heads that
    need one.
    """

    variant: str = "osen1"
    q: int = 3
    ncl: bool = False
    input_shape: Tuple[int, int] = (28, 28)
    m: Optional[int] = None
    widths: Tuple[int, int] = (48, 24)
    head: str = "segmentation"
    group: Optional[Tuple[int, int]] = None
    channels: int = 1

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise NumericsError(f"unknown variant {self.variant!r}")
        if self.head not in _HEADS:
            raise NumericsError(f"unknown head {self.head!r}")
        if int(self.q) < 1:
            raise NumericsError("polynomial order must be >= 1")
        self.q = int(self.q)
        self.channels = int(self.channels)
        if self.channels < 1:
            raise NumericsError("channel count must be >= 1")
        if self.channels != 1 and (self.ncl or self.head != "segmentation"):
            raise NumericsError(
                "multi-channel maps support only the segmentation head")
        H, W = self.input_shape
        if H < 4 or W < 4:
            raise NumericsError(f"map extent {H}x{W} too small")
        self.input_shape = (int(H), int(W))
        self.widths = (int(self.widths[0]), int(self.widths[1]))
        if self.variant == "osen2" and (H % 2 or W % 2):
            raise NumericsError("the pooled variant needs even map extents")
        if self.ncl:
            if self.m is None or int(self.m) < 1:
                raise NumericsError("measurement length m required with ncl")
            self.m = int(self.m)
        if self.head in ("classification", "hybrid"):
            if self.group is None:
                raise NumericsError(f"{self.head} head needs a group shape")
            g_h, g_w = int(self.group[0]), int(self.group[1])
            if g_h < 1 or g_w < 1 or H % g_h or W % g_w:
                raise NumericsError(
                    f"group {g_h}x{g_w} does not tile a {H}x{W} map")
            self.group = (g_h, g_w)


@dataclass(eq=False)
class ModelParams:
    """A built model: the layer graph plus the stored input scale."""

    spec: ModelSpec
    nodes: List[LayerNode]
    norm_scale: float = 1.0

    @property
    def head(self) -> str:
        return self.spec.head

    @property
    def group(self):
        return self.spec.group

    @property
    def layers(self):
        """The parameter records in graph order (parameter-free nodes skipped)."""
        return [n.params for n in self.nodes if n.params is not None]


def _build_nodes(spec: ModelSpec, rng: np.random.Generator,
                 denoiser: Optional[np.ndarray]) -> List[LayerNode]:
    H, W = spec.input_shape
    bound = min(H, W) / 2.0
    w1, w2 = spec.widths
    q = spec.q
    nodes: List[LayerNode] = []
    if spec.ncl:
        if denoiser is None:
            raise NumericsError("ncl build needs the denoiser matrix")
        B = as_tensor(denoiser)
        n = H * W
        if B.shape != (n, spec.m):
            raise NumericsError(
                f"denoiser shape {B.shape} does not match ({n}, {spec.m})")
        Wg = np.zeros((q, n, spec.m))
        Wg[0] = B
        gop = SelfGOPParams(W=Wg, b=np.zeros((q, n)), activation="none")
        nodes.append(LayerNode("gop", gop))
        nodes.append(LayerNode("reshape", shape=(H, W)))
    mk = init_operational_params
    ch = spec.channels
    if spec.variant == "osen1":
        nodes.append(LayerNode("op", mk(w1, ch, q, 3, "tanh", rng),
                               shift_bound=bound))
        nodes.append(LayerNode("op", mk(w2, w1, q, 3, "tanh", rng),
                               shift_bound=bound))
        nodes.append(LayerNode("op", mk(ch, w2, q, 3, "sigmoid", rng),
                               shift_bound=bound))
    else:
        nodes.append(LayerNode("op", mk(w1, ch, q, 3, "tanh", rng),
                               shift_bound=bound))
        nodes.append(LayerNode("pool"))
        nodes.append(LayerNode("op", mk(w2, w1, q, 3, "tanh", rng),
                               shift_bound=bound / 2.0))
        nodes.append(LayerNode("op_t", mk(w2, w2, q, 3, "tanh", rng),
                               shift_bound=bound))
        nodes.append(LayerNode("op", mk(ch, w2, q, 3, "sigmoid", rng),
                               shift_bound=bound))
    return nodes


def build(spec: ModelSpec, seed: int,
          denoiser: Optional[np.ndarray] = None) -> ModelParams:
    """Construct and initialize a model.

    Kernel coefficients follow the fan-in-scaled uniform policy; shifts
    and biases start at zero.  With ``ncl``, the front-end layer's
    first-order weight is set to ``denoiser`` (higher orders and biases
    zero) so the initial forward pass reproduces the linear estimate
    exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    nodes = _build_nodes(spec, rng, denoiser)
    return ModelParams(spec=spec, nodes=nodes)


def param_count(params) -> int:
    """Total number of trainable scalars."""
    nodes = params.nodes if isinstance(params, ModelParams) else list(params)
    total = 0
    for node in nodes:
        if node.kind in ("op", "op_t"):
            p = node.params
            total += p.W.size + p.b.size + p.shifts.size
        elif node.kind == "gop":
            p = node.params
            total += p.W.size + p.b.size
    return int(total)


def _as_network_input(params: ModelParams, x) -> np.ndarray:
    x = as_tensor(x)
    if params.spec.ncl:
        if x.ndim != 1 or x.shape[0] != params.spec.m:
            raise NumericsError(
                f"expected a length-{params.spec.m} measurement, "
                f"got shape {x.shape}")
        return x
    ch = params.spec.channels
    if x.ndim == 2 and ch == 1:
        x = x[None]
    H, W = params.spec.input_shape
    if x.shape != (ch, H, W):
        raise NumericsError(
            f"expected a ({ch}, {H}, {W}) map, got shape {x.shape}")
    return x


def infer(params: ModelParams, x):
    """Forward pass on one sample (stored input scale applied).

    Returns the probability map; a model with a class head returns
    ``(map, class_probabilities)``.
    """
    xs = _as_network_input(params, x) * params.norm_scale
    v_map, c_hat = forward(params.nodes, xs, params.head, params.group)
    if params.head in ("hybrid", "classification"):
        return v_map, c_hat
    return v_map


def binarize(p, tau: float = 0.5) -> np.ndarray:
    """Threshold a probability map to a {0,1} support mask (strict >)."""
    p = np.asarray(p, dtype=np.float64)
    return (p > tau).astype(np.float64)


def _f1_binary(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = float(np.sum((pred == 1) & (truth == 1)))
    fp = float(np.sum((pred == 1) & (truth == 0)))
    fn = float(np.sum((pred == 0) & (truth == 1)))
    den = 2.0 * tp + fp + fn
    return 2.0 * tp / den if den > 0 else 0.0


@dataclass
class TrainHistory:
    """Per-epoch means of the training/validation losses plus validation F1."""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_f1: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")


def _norm_scale_from(spec: ModelSpec, nodes, samples) -> float:
    """Reciprocal 99th-percentile |input| over the training inputs.

    For a measurement-input model the percentile is taken over the linear
    front-end estimates (the quantity actually entering the image-domain
    stack); the front end is linear at init, so scaling the measurement
    scales that estimate identically.
    """
    if not samples:
        return 1.0
    if spec.ncl:
        B = nodes[0].params.W[0]
        vals = [np.abs(B @ np.asarray(s[0], dtype=np.float64)) for s in samples]
    else:
        vals = [np.abs(np.asarray(s[0], dtype=np.float64)) for s in samples]
    p99 = float(np.percentile(np.concatenate([v.ravel() for v in vals]), 99.0))
    return 1.0 / p99 if p99 > 0 else 1.0


def _scaled_sample(sample, scale: float):
    x = np.asarray(sample[0], dtype=np.float64) * scale
    if x.ndim == 2:
        x = x[None]
    return (x,) + tuple(sample[1:])


def train_model(spec: ModelSpec, dataset, loss: LossSpec, epochs: int,
                seed: int, denoiser: Optional[np.ndarray] = None,
                batch_size: int = 32, freeze_shifts: bool = False,
                progress=None):
    """Train a freshly built model with Adam; keep the validation-best state.

    ``dataset`` maps ``"train"``/``"val"`` to sample lists — ``(x, v)``
    pairs, or ``(x, v, c)`` triples for the hybrid loss.  Runs are
    bit-reproducible for a fixed ``(seed, data order)``; everything is
    single-threaded.  Returns ``(ModelParams, TrainHistory)``.
    """
    train_set = list(dataset["train"])
    val_set = list(dataset["val"])
    if not train_set:
        raise NumericsError("empty training set")
    root = np.random.SeedSequence(seed)
    init_seq, shuffle_seq = root.spawn(2)
    rng = np.random.default_rng(init_seq)
    nodes = _build_nodes(spec, rng, denoiser)
    params = ModelParams(spec=spec, nodes=nodes)
    params.norm_scale = _norm_scale_from(spec, nodes, train_set)

    train_scaled = [_scaled_sample(s, params.norm_scale) for s in train_set]
    val_scaled = [_scaled_sample(s, params.norm_scale) for s in val_set]

    shuffle = np.random.default_rng(shuffle_seq)
    state = init_adam(nodes)
    history = TrainHistory()
    best_nodes = copy.deepcopy(nodes)
    n = len(train_scaled)
    for epoch in range(int(epochs)):
        order = shuffle.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch_size):
            batch = [train_scaled[i] for i in order[lo:lo + batch_size]]
            grads, value = backward(params, batch, loss)
            if not np.isfinite(value):
                raise NumericsError(
                    f"non-finite loss at epoch {epoch}, batch {lo // batch_size}")
            if freeze_shifts:
                for g in grads:
                    if g is not None and g.dshifts is not None:
                        g.dshifts[:] = 0.0
            adam_step(nodes, grads, state)
            epoch_loss += value
        history.train_loss.append(epoch_loss / n)

        val_loss, f1 = _evaluate(params, val_scaled, loss)
        history.val_loss.append(val_loss)
        history.val_f1.append(f1)
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_nodes = copy.deepcopy(nodes)
        if progress is not None:
            progress(epoch, history)
    if val_set:
        params.nodes = best_nodes
    return params, history


def _evaluate(params: ModelParams, scaled_samples, loss: LossSpec):
    """Mean loss and pixel F1 over already-scaled samples."""
    from .training import _sample_loss_and_dmap, forward_cached

    if not scaled_samples:
        return float("inf"), 0.0
    total = 0.0
    f1s = []
    for sample in scaled_samples:
        v_map, c_hat, _ = forward_cached(params.nodes, sample[0],
                                         params.head, params.group)
        value, _, _ = _sample_loss_and_dmap(v_map, c_hat, sample, loss)
        total += value
        truth = np.asarray(sample[1], dtype=np.float64).reshape(v_map.shape)
        f1s.append(_f1_binary(binarize(v_map), truth))
    return total / len(scaled_samples), float(np.mean(f1s))


# ---------------------------------------------------------------------------
# persistence


def _spec_record(params: ModelParams) -> bytes:
    d = {
        "variant": params.spec.variant,
        "q": params.spec.q,
        "ncl": params.spec.ncl,
        "input_shape": list(params.spec.input_shape),
        "m": params.spec.m,
        "widths": list(params.spec.widths),
        "head": params.spec.head,
        "group": list(params.spec.group) if params.spec.group else None,
        "channels": params.spec.channels,
        "norm_scale": params.norm_scale,
    }
    return json.dumps(d, sort_keys=True).encode("utf-8")


def _spec_from_record(blob: bytes) -> Tuple[ModelSpec, float]:
    d = json.loads(blob.decode("utf-8"))
    spec = ModelSpec(
        variant=d["variant"], q=d["q"], ncl=d["ncl"],
        input_shape=tuple(d["input_shape"]), m=d["m"],
        widths=tuple(d["widths"]), head=d["head"],
        group=tuple(d["group"]) if d["group"] else None,
        channels=d.get("channels", 1))
    return spec, float(d["norm_scale"])


def _tensor_stream(params: ModelParams):
    for node in params.nodes:
        if node.kind in ("op", "op_t"):
            yield node.params.W
            yield node.params.b
            yield node.params.shifts
        elif node.kind == "gop":
            yield node.params.W
            yield node.params.b


def save_params(params: ModelParams, path) -> None:
    """Write a self-describing, checksummed weight container.

    Layout: magic, format version, spec record, then every parameter
    tensor as a shape header plus little-endian doubles, and a CRC32
    trailer over everything before it.
    """
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _FORMAT_VERSION))
    rec = _spec_record(params)
    buf.write(struct.pack("<I", len(rec)))
    buf.write(rec)
    for arr in _tensor_stream(params):
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_params(path, expect: Optional[ModelSpec] = None) -> ModelParams:
    """Load a weight container written by :func:`save_params`.

    Verifies magic, format version, and the CRC32 trailer; reproduces the
    saved parameters bit for bit.  ``expect`` (optional) asserts the file
    holds a particular architecture.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise NumericsError(f"{path}: not a weight container")
    payload, trailer = raw[:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", trailer)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise NumericsError(f"{path}: checksum failure")
    view = io.BytesIO(payload)
    view.read(4)
    (version,) = struct.unpack("<I", view.read(4))
    if version != _FORMAT_VERSION:
        raise NumericsError(
            f"{path}: format version {version} not supported")
    (rec_len,) = struct.unpack("<I", view.read(4))
    spec, norm_scale = _spec_from_record(view.read(rec_len))
    if expect is not None and _spec_record(
            ModelParams(expect, [], norm_scale)) != _spec_record(
            ModelParams(spec, [], norm_scale)):
        raise NumericsError(f"{path}: stored model does not match the "
                            f"expected architecture")
    params = build(spec, seed=0,
                   denoiser=np.zeros((spec.input_shape[0] * spec.input_shape[1],
                                      spec.m)) if spec.ncl else None)
    params.norm_scale = norm_scale
    for arr in _tensor_stream(params):
        head = view.read(4)
        if len(head) < 4:
            raise NumericsError(f"{path}: truncated file")
        (ndim,) = struct.unpack("<I", head)
        dims = struct.unpack(f"<{ndim}I", view.read(4 * ndim))
        if dims != arr.shape:
            raise NumericsError(
                f"{path}: stored tensor shape {dims} does not match "
                f"architecture shape {arr.shape}")
        nbytes = int(np.prod(dims)) * 8
        data = view.read(nbytes)
        if len(data) < nbytes:
            raise NumericsError(f"{path}: truncated file")
        arr[...] = np.frombuffer(data, dtype="<f8").reshape(dims)
    if view.read(1):
        raise NumericsError(f"{path}: trailing bytes after tensor stream")
    return params
