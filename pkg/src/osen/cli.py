"""Experiment driver: configs, dataset plumbing, pipelines, and reports.

A run is described by a flat key/value config file (a TOML-compatible
subset: scalars, quoted strings, and one-line lists — no tables).  Every
key has a documented default; unknown keys are rejected so typos cannot
silently fall back to defaults.  ``run_experiment`` executes one of three
pipelines over the cross product of measurement rates, polynomial orders
and seeds, then writes ``metrics.csv`` (plus curve/timing CSVs and a
config echo) into the output directory.

Reproducibility: all randomness flows from the per-run seed through
``numpy.random.SeedSequence`` spawn keys, one fixed key per subsystem
(data, matrices, training, noise...).  Two runs with the same config are
bit-identical, and the data a run sees never depends on Q or the model
variant, so architecture ablations are paired on identical inputs.

Wall-clock times are deliberately kept out of metrics.csv (they land in
timings.csv) so the metrics file is byte-reproducible.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import NumericsError, pca_projection
from . import models, recon, sparse, training


class ConfigError(ValueError):
    """Bad config file, unknown key, or inconsistent field values."""


class PipelineFailure(RuntimeError):
    """A pipeline stage failed; carries the stage name for the abort message."""

    def __init__(self, stage: str, unit: str, err: Exception):
        super().__init__(f"stage '{stage}' failed for {unit}: {err}")
        self.stage = stage
        self.unit = unit


# ---------------------------------------------------------------------------
# configuration

_PIPELINES = ("se_spatial", "rbc_classify", "cs_tv")

_INF = float("inf")
_NAN = float("nan")


@dataclass
class ExperimentConfig:
    """One experiment request; defaults are the documented desk-scale table.

    ``side = 0`` means "pipeline default" (28 for support estimation,
    64 for the Fourier reconstruction pipeline).  ``proxy_lambda`` and
    ``crc_lambda`` set to nan select the validation grid search.
    """

    pipeline: str = ""
    mr: List[float] = field(default_factory=lambda: [0.25])
    q: List[int] = field(default_factory=lambda: [3])
    variant: str = "osen1"
    ncl: bool = False
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    source: str = "blobs"          # blobs | sparse | idx | pgm
    idx_images: str = ""
    idx_labels: str = ""
    image_dir: str = ""
    side: int = 0
    sparsity: float = 0.2
    train_count: int = 2000
    val_count: int = 400
    test_count: int = 500
    epochs: int = 100
    batch_size: int = 32
    widths: List[int] = field(default_factory=lambda: [48, 24])
    loss: str = ""                 # empty = pipeline default

    lambda_g: float = 0.01
    lambda_c: float = 0.1
    snr: List[float] = field(default_factory=lambda: [_INF])
    proxy: str = "lmmse"           # lmmse | mc
    proxy_lambda: float = _NAN
    outdir: str = "osen_out"
    # classification pipeline
    classes: int = 6
    atoms_per_class: int = 8
    block: List[int] = field(default_factory=lambda: [2, 4])
    raw_dim: int = 128
    train_per_class: int = 40
    val_per_class: int = 10
    test_per_class: int = 25
    class_noise: float = 0.08
    crc_lambda: float = _NAN
    # Fourier reconstruction pipeline
    weights: str = "oracle"        # oracle | trained | none
    phantom_count: int = 8
    tau1: float = 0.04
    epsilon: float = 0.2
    tv_lambda: float = 0.01
    tv_rho: float = 1.0
    tv_alpha: float = 0.7
    tv_abs_tol: float = 1e-4
    tv_rel_tol: float = 1e-2
    tv_max_it: int = 2000


_LIST_FIELDS = {"mr": float, "q": int, "seeds": int, "widths": int,
                "snr": float, "block": int}
_STR_FIELDS = {"pipeline", "variant", "source", "idx_images", "idx_labels",
               "image_dir", "loss", "proxy", "outdir", "weights"}
_BOOL_FIELDS = {"ncl"}
_INT_FIELDS = {"side", "train_count", "val_count", "test_count", "epochs",
               "batch_size", "classes", "atoms_per_class", "raw_dim",
               "train_per_class", "val_per_class", "test_per_class",
               "phantom_count", "tv_max_it"}
_FLOAT_FIELDS = {"sparsity", "lambda_g", "lambda_c", "proxy_lambda",
                 "class_noise", "crc_lambda", "tau1", "epsilon", "tv_lambda",
                 "tv_rho", "tv_alpha", "tv_abs_tol", "tv_rel_tol"}


def _parse_scalar(tok: str, path_hint: str):
    tok = tok.strip()
    if not tok:
        raise ConfigError(f"empty value in {path_hint}")
    if tok == "true":
        return True
    if tok == "false":
        return False
    if len(tok) >= 2 and tok[0] in "\"'" and tok[-1] == tok[0]:
        body = tok[1:-1]
        if tok[0] in body:
            raise ConfigError(f"nested quote in string {tok!r}")
        return body
    if tok in ("inf", "+inf"):
        return _INF
    if tok == "-inf":
        return -_INF
    if tok == "nan":
        return _NAN
    try:
        return int(tok, 10)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        raise ConfigError(f"cannot parse value {tok!r} in {path_hint}") from None


def parse_config_text(text: str, path_hint: str = "<config>") -> ExperimentConfig:
    """Parse the flat key = value format into an ExperimentConfig."""
    known = {f.name for f in fields(ExperimentConfig)}
    seen: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path_hint}:{lineno}: expected 'key = value'")
        key, _, rhs = line.partition("=")
        key = key.strip()
        rhs = rhs.strip()
        # strip a trailing comment, but not a '#' inside a quoted string
        if "#" in rhs and not (rhs.startswith(("\"", "'"))):
            rhs = rhs.split("#", 1)[0].strip()
        if key not in known:
            raise ConfigError(f"{path_hint}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path_hint}:{lineno}: duplicate key {key!r}")
        where = f"{path_hint}:{lineno}"
        if rhs.startswith("["):
            if not rhs.endswith("]"):
                raise ConfigError(f"{where}: unterminated list")
            body = rhs[1:-1].strip()
            items = [] if not body else [
                _parse_scalar(t, where) for t in body.split(",")]
            seen[key] = items
        else:
            seen[key] = _parse_scalar(rhs, where)
    return _config_from_dict(seen, path_hint)


def _coerce_number(key: str, value, want, path_hint: str):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path_hint}: {key} must be a number, got {value!r}")
    if want is int:
        if isinstance(value, float):
            raise ConfigError(f"{path_hint}: {key} must be an integer")
        return int(value)
    return float(value)


def _config_from_dict(seen: Dict[str, object], path_hint: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in seen.items():
        if key in _LIST_FIELDS:
            if not isinstance(value, list):
                value = [value]
            elem = _LIST_FIELDS[key]
            value = [_coerce_number(key, v, elem, path_hint) for v in value]
        elif key in _BOOL_FIELDS:
            if not isinstance(value, bool):
                raise ConfigError(f"{path_hint}: {key} must be true or false")
        elif key in _STR_FIELDS:
            if not isinstance(value, str):
                raise ConfigError(f"{path_hint}: {key} must be a quoted string")
        elif key in _INT_FIELDS:
            value = _coerce_number(key, value, int, path_hint)
        elif key in _FLOAT_FIELDS:
            value = _coerce_number(key, value, float, path_hint)
        setattr(cfg, key, value)
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.pipeline not in _PIPELINES:
        raise ConfigError(
            f"pipeline must be one of {_PIPELINES}, got {cfg.pipeline!r}")
    if cfg.variant not in ("osen1", "osen2"):
        raise ConfigError(f"variant must be osen1 or osen2, got {cfg.variant!r}")
    if not cfg.mr or any(not (0.0 < r < 1.0) for r in cfg.mr):
        raise ConfigError("mr entries must lie in (0, 1)")
    if not cfg.q or any(qq < 1 for qq in cfg.q):
        raise ConfigError("q entries must be >= 1")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    if cfg.source not in ("blobs", "sparse", "idx", "pgm"):
        raise ConfigError(f"unknown source {cfg.source!r}")
    if cfg.source == "idx" and not cfg.idx_images:
        raise ConfigError("source = idx requires idx_images")
    if cfg.source == "pgm" and not cfg.image_dir:
        raise ConfigError("source = pgm requires image_dir")
    if cfg.side < 0:
        raise ConfigError("side must be >= 0 (0 = pipeline default)")
    if not (0.0 < cfg.sparsity < 1.0):
        raise ConfigError("sparsity must lie in (0, 1)")
    for name in ("train_count", "val_count", "test_count", "epochs",
                 "batch_size", "phantom_count"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if len(cfg.widths) != 2 or any(w < 1 for w in cfg.widths):
        raise ConfigError("widths must be two positive layer sizes")
    if any(not (s > 0 or s == _INF) for s in cfg.snr):
        raise ConfigError("snr entries must be positive dB values or inf")
    if cfg.proxy not in ("lmmse", "mc"):
        raise ConfigError(f"proxy must be lmmse or mc, got {cfg.proxy!r}")
    if not cfg.loss:
        cfg.loss = "hybrid" if cfg.pipeline == "rbc_classify" else "mse_mask"
    if cfg.pipeline == "se_spatial" and cfg.loss != "mse_mask":
        raise ConfigError("se_spatial supports loss = mse_mask only")
    if cfg.pipeline == "rbc_classify" and cfg.loss not in ("hybrid", "group_l2"):
        raise ConfigError("rbc_classify supports loss = hybrid or group_l2")
    if cfg.pipeline == "cs_tv" and cfg.loss != "mse_mask":
        raise ConfigError("cs_tv supports loss = mse_mask only")
    if cfg.pipeline == "rbc_classify":
        if len(cfg.block) != 2 or any(b < 1 for b in cfg.block):
            raise ConfigError("block must be two positive extents")
        if cfg.classes < 2 or cfg.atoms_per_class < 1:
            raise ConfigError("need >= 2 classes and >= 1 atom per class")
        if cfg.atoms_per_class != cfg.block[0] * cfg.block[1]:
            raise ConfigError("atoms_per_class must equal block area")
        if cfg.train_per_class < cfg.atoms_per_class:
            raise ConfigError("train_per_class must cover the dictionary atoms")
        if cfg.ncl:
            raise ConfigError("ncl applies to the se_spatial pipeline only")
    if cfg.pipeline == "cs_tv":
        if cfg.weights not in ("oracle", "trained", "none"):
            raise ConfigError("weights must be oracle, trained, or none")
        if cfg.ncl:
            raise ConfigError("ncl applies to the se_spatial pipeline only")
        if not (cfg.epsilon > 0.0):
            raise ConfigError("epsilon must be > 0")
        if cfg.tv_max_it < 1:
            raise ConfigError("tv_max_it must be >= 1")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v + '"'
    if isinstance(v, float):
        if v == _INF:
            return "inf"
        if v == -_INF:
            return "-inf"
        if v != v:
            return "nan"
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


def config_echo(cfg: ExperimentConfig) -> str:
    """Canonical re-serialization of a config (field-table order)."""
    lines = [f"{f.name} = {_toml_value(getattr(cfg, f.name))}"
             for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# seed plumbing: one root seed per run, fixed spawn keys per subsystem

_K_DATA, _K_MATRIX, _K_TRAIN, _K_NOISE, _K_MASK, _K_SPLIT, _K_PHANTOM = range(1, 8)


def _mr_key(mr: float) -> int:
    return int(round(mr * 1_000_000))


def _sub_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1)[0])


def _sub_rng(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


# ---------------------------------------------------------------------------
# dataset ingestion and synthesis

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path) -> np.ndarray:
    """Decode one IDX file (unsigned-byte payload, big-endian header)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ConfigError(f"{path}: truncated IDX header")
    magic = int.from_bytes(data[:4], "big")
    if magic == _IDX_IMAGES:
        ndim = 3
    elif magic == _IDX_LABELS:
        ndim = 1
    else:
        raise ConfigError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ConfigError(f"{path}: truncated IDX header")
    dims = [int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big")
            for i in range(ndim)]
    count = 1
    for d in dims:
        count *= d
    if len(data) < header + count:
        raise ConfigError(
            f"{path}: truncated IDX payload ({len(data) - header} of "
            f"{count} bytes)")
    if len(data) > header + count:
        raise ConfigError(f"{path}: trailing bytes after IDX payload")
    arr = np.frombuffer(data, dtype=np.uint8, offset=header, count=count)
    return arr.reshape(dims)


def ingest_idx(images_path, labels_path: Optional[str] = None, seed: int = 0):
    """Load IDX images (and optional labels), split 5:1:1 train/val/test.

    Images are scaled to [0, 1].  The split is a seeded permutation with
    sizes ``5N//7, N//7`` and the remainder, so 7000 samples split
    5000/1000/1000.  Returns ``{"train": (x, y), "val": ..., "test": ...}``
    with ``y = None`` when no label file is given.
    """
    images = _read_idx(images_path)
    if images.ndim != 3:
        raise ConfigError(f"{images_path}: expected an image IDX file")
    labels = None
    if labels_path:
        labels = _read_idx(labels_path)
        if labels.ndim != 1:
            raise ConfigError(f"{labels_path}: expected a label IDX file")
        if labels.shape[0] != images.shape[0]:
            raise ConfigError(
                f"label count {labels.shape[0]} != image count "
                f"{images.shape[0]}")
    x = images.astype(np.float64) / 255.0
    n = x.shape[0]
    perm = _sub_rng(seed, _K_SPLIT).permutation(n)
    n_train = (5 * n) // 7
    n_val = n // 7
    idx = {"train": perm[:n_train],
           "val": perm[n_train:n_train + n_val],
           "test": perm[n_train + n_val:]}
    out = {}
    for part, sel in idx.items():
        ys = labels[sel].astype(np.int64) if labels is not None else None
        out[part] = (x[sel], ys)
    return out


def _read_pgm(path) -> np.ndarray:
    """Read a P2/P5 portable graymap as float64 in [0, 1]."""
    data = Path(path).read_bytes()

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":                      # comment to end of line
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b""):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ConfigError(f"{path}: truncated graymap header")
        return data[start:pos]

    magic = token()
    if magic not in (b"P2", b"P5"):
        raise ConfigError(f"{path}: not a grayscale graymap (magic {magic!r})")
    width = int(token())
    height = int(token())
    maxval = int(token())
    if width < 1 or height < 1 or not (0 < maxval < 65536):
        raise ConfigError(f"{path}: bad graymap dimensions")
    if magic == b"P5":
        pos += 1                               # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = width * height * dtype.itemsize
        if len(data) - pos < need:
            raise ConfigError(f"{path}: truncated graymap payload")
        img = np.frombuffer(data, dtype=dtype, count=width * height,
                            offset=pos).reshape(height, width)
    else:
        vals = data[pos:].split()
        if len(vals) < width * height:
            raise ConfigError(f"{path}: truncated graymap payload")
        img = np.array([int(v) for v in vals[:width * height]],
                       dtype=np.int64).reshape(height, width)
        if img.min() < 0 or img.max() > maxval:
            raise ConfigError(f"{path}: sample outside [0, maxval]")
    return img.astype(np.float64) / float(maxval)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    sy = h / out_h
    sx = w / out_w
    ys = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def ingest_image_dir(path, side: int) -> np.ndarray:
    """Load every graymap in a directory as a (count, side, side) stack.

    Each image is center-cropped to a square then bilinearly resampled;
    an image that is already side x side passes through unchanged.  Any
    unreadable or non-grayscale file aborts the run, listing every
    offender at once.
    """
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"not a directory: {p}")
    names = sorted(f for f in p.iterdir() if f.is_file())
    if not names:
        raise ConfigError(f"no files in {p}")
    images, bad = [], []
    for f in names:
        try:
            img = _read_pgm(f)
        except (ConfigError, ValueError) as e:
            bad.append(f"{f.name}: {e}")
            continue
        h, w = img.shape
        s = min(h, w)
        r0 = (h - s) // 2
        c0 = (w - s) // 2
        images.append(_resize_bilinear(img[r0:r0 + s, c0:c0 + s], side, side))
    if bad:
        raise ConfigError("unreadable graymap files:\n  " + "\n  ".join(bad))
    return np.stack(images)


def synth_sparse(n: int, k: int, count: int, seed: int) -> np.ndarray:
    """Signals with k uniformly placed nonzeros, amplitudes U[0.2, 1]."""
    if k >= n:
        raise ConfigError(f"k={k} must be < n={n}")
    if k < 0 or count < 1:
        raise ConfigError("need k >= 0 and count >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    x = np.zeros((count, n))
    for i in range(count):
        support = rng.choice(n, size=k, replace=False)
        x[i, support] = rng.uniform(0.2, 1.0, size=k)
    return x


def _paint_ellipse(img: np.ndarray, rng: np.random.Generator,
                   axis_lo: float, axis_hi: float) -> None:
    side = img.shape[0]
    cy, cx = rng.uniform(0.2 * side, 0.8 * side, size=2)
    a = rng.uniform(axis_lo, axis_hi)
    b = rng.uniform(axis_lo, axis_hi)
    th = rng.uniform(0.0, np.pi)
    amp = rng.uniform(0.2, 1.0)
    yy, xx = np.mgrid[0:side, 0:side]
    u = (yy - cy) * np.cos(th) + (xx - cx) * np.sin(th)
    v = -(yy - cy) * np.sin(th) + (xx - cx) * np.cos(th)
    img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = amp


def synth_blobs(side: int, count: int, seed: int,
                density: float = 0.2) -> np.ndarray:
    """Piecewise-constant ellipse scenes with nonzero fraction near density.

    Each image overlays 2-5 random ellipses (amplitudes U[0.2, 1], later
    shapes occlude earlier ones) and is redrawn until its support density
    lands within +-0.04 of the target, keeping the closest attempt as a
    fallback.  These are the spatially structured sparse signals the
    support-estimation pipeline trains on.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    axis_lo, axis_hi = 0.07 * side, 0.19 * side
    out = np.zeros((count, side, side))
    for i in range(count):
        best, best_gap = None, _INF
        for _ in range(40):
            img = np.zeros((side, side))
            for _ in range(int(rng.integers(2, 6))):
                _paint_ellipse(img, rng, axis_lo, axis_hi)
            gap = abs(float(np.mean(img > 0)) - density)
            if gap < best_gap:
                best, best_gap = img, gap
            if gap <= 0.04:
                break
        out[i] = best
    return out


def synth_phantom(side: int, seed: int) -> np.ndarray:
    """One piecewise-constant phantom: rectangles and ellipses in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    img = np.zeros((side, side))
    for _ in range(int(rng.integers(4, 8))):
        if rng.uniform() < 0.5:
            _paint_ellipse(img, rng, 0.08 * side, 0.30 * side)
        else:
            h = int(rng.integers(side // 8, side // 2))
            w = int(rng.integers(side // 8, side // 2))
            r0 = int(rng.integers(0, side - h))
            c0 = int(rng.integers(0, side - w))
            img[r0:r0 + h, c0:c0 + w] = rng.uniform(0.2, 1.0)
    return img


# ---------------------------------------------------------------------------
# shared pipeline pieces

_LAMBDA_GRID = np.logspace(-10.0, 2.0, 12)


def _search_proxy_lambda(problem: sparse.SensingProblem, x_val: np.ndarray,
                         y_val: np.ndarray) -> float:
    """Pick the back-projection ridge on validation proxy MSE.

    Coarse 12-point log grid over [1e-10, 1e2], then a 7-point refinement
    spanning one decade around the coarse winner.
    """
    def score(lam: float) -> float:
        B = sparse.denoiser_matrix(problem, "lmmse", lam)
        r = y_val @ B.T - x_val
        return float(np.mean(r * r))

    coarse = [(score(l), l) for l in _LAMBDA_GRID]
    _, best = min(coarse, key=lambda t: t[0])
    fine = np.logspace(np.log10(best) - 1.0, np.log10(best) + 1.0, 7)
    refined = [(score(l), l) for l in fine]
    _, best = min(refined, key=lambda t: t[0])
    return float(best)


def _macro_se(truth_maps: Sequence[np.ndarray],
              pred_maps: Sequence[np.ndarray]) -> sparse.SeMetrics:
    per = [sparse.se_metrics(t.ravel(), p.ravel())
           for t, p in zip(truth_maps, pred_maps)]
    return sparse.macro_average(per)


@dataclass
class RunResult:
    """Metrics for one (mr, Q, seed) unit, plus its noise-sweep curve."""

    pipeline: str
    mr: float
    q: int
    variant: str
    ncl: bool
    seed: int
    metrics: Dict[str, float]
    param_count: int
    wall_time: float
    curve: List[Tuple[float, float]] = field(default_factory=list)


@contextlib.contextmanager
def _stage(name: str, unit: str):
    try:
        yield
    except PipelineFailure:
        raise
    except Exception as e:
        raise PipelineFailure(name, unit, e) from e


def _se_signals(cfg: ExperimentConfig, side: int, seed: int) -> np.ndarray:
    """Training/val/test signal stack for the support-estimation pipeline."""
    total = cfg.train_count + cfg.val_count + cfg.test_count
    dseed = _sub_seed(seed, _K_DATA)
    if cfg.source == "blobs":
        return synth_blobs(side, total, dseed, density=cfg.sparsity)
    if cfg.source == "sparse":
        n = side * side
        k = int(round(cfg.sparsity * n))
        return synth_sparse(n, k, total, dseed).reshape(total, side, side)
    if cfg.source == "idx":
        parts = ingest_idx(cfg.idx_images, cfg.idx_labels or None, seed=dseed)
        stacked = np.concatenate([parts["train"][0], parts["val"][0],
                                  parts["test"][0]])
        if stacked.shape[1] != side or stacked.shape[2] != side:
            raise ConfigError(
                f"idx images are {stacked.shape[1]}x{stacked.shape[2]}, "
                f"config side is {side}")
        if stacked.shape[0] < total:
            raise ConfigError(
                f"idx source has {stacked.shape[0]} images, need {total}")
        return stacked[:total]
    if cfg.source == "pgm":
        imgs = ingest_image_dir(cfg.image_dir, side)
        if imgs.shape[0] < total:
            raise ConfigError(
                f"image dir has {imgs.shape[0]} images, need {total}")
        return imgs[:total]
    raise ConfigError(f"unknown source {cfg.source!r}")


def _run_se_spatial(cfg: ExperimentConfig, mr: float, q: int,
                    seed: int) -> RunResult:
    t0 = time.perf_counter()
    unit = f"(pipeline=se_spatial, mr={mr}, q={q}, seed={seed})"
    side = cfg.side or 28
    n = side * side
    m = int(round(mr * n))
    if not (1 <= m < n):
        raise ConfigError(f"mr={mr} gives m={m} outside [1, {n})")

    with _stage("dataset", unit):
        imgs = _se_signals(cfg, side, seed)
        x = imgs.reshape(imgs.shape[0], n)
        v = (x > 0.0).astype(np.float64)
        tr, va = cfg.train_count, cfg.val_count
        sl_train = slice(0, tr)
        sl_val = slice(tr, tr + va)
        sl_test = slice(tr + va, tr + va + cfg.test_count)

    with _stage("measurement", unit):
        A = sparse.gaussian_measurement_matrix(
            m, n, _sub_seed(seed, _K_MATRIX, _mr_key(mr)))
        problem = sparse.SensingProblem(A)
        y = x @ A.T
        lam = cfg.proxy_lambda
        if cfg.proxy == "lmmse" and lam != lam:          # nan -> grid search
            lam = _search_proxy_lambda(problem, x[sl_val], y[sl_val])
        if cfg.proxy == "mc":
            lam = 0.0
        B = sparse.denoiser_matrix(problem, cfg.proxy, lam)

    def net_input(yi: np.ndarray) -> np.ndarray:
        if cfg.ncl:
            return yi
        return (B @ yi).reshape(side, side)

    with _stage("train", unit):
        spec = models.ModelSpec(
            variant=cfg.variant, q=q, ncl=cfg.ncl, input_shape=(side, side),
            m=m if cfg.ncl else None, widths=tuple(cfg.widths))
        dataset = {
            "train": [(net_input(y[i]), v[i].reshape(side, side))
                      for i in range(sl_train.start, sl_train.stop)],
            "val": [(net_input(y[i]), v[i].reshape(side, side))
                    for i in range(sl_val.start, sl_val.stop)],
        }
        params, hist = models.train_model(
            spec, dataset, training.LossSpec("mse_mask"), cfg.epochs,
            seed=_sub_seed(seed, _K_TRAIN, q, 1 if cfg.ncl else 0),
            denoiser=B if cfg.ncl else None, batch_size=cfg.batch_size)

    with _stage("evaluate", unit):
        truth = [v[i].reshape(side, side)
                 for i in range(sl_test.start, sl_test.stop)]
        pred = [models.binarize(models.infer(params, net_input(y[i])))
                for i in range(sl_test.start, sl_test.stop)]
        agg = _macro_se(truth, pred)
        curve: List[Tuple[float, float]] = []
        for si, snr in enumerate(cfg.snr):
            noisy_pred = []
            for j, i in enumerate(range(sl_test.start, sl_test.stop)):
                yn = sparse.add_measurement_noise(
                    y[i], snr, _sub_seed(seed, _K_NOISE, si, j))
                noisy_pred.append(
                    models.binarize(models.infer(params, net_input(yn))))
            curve.append((float(snr), _macro_se(truth, noisy_pred).f1))

    metrics = dict(agg.as_dict())
    metrics["best_val_loss"] = float(hist.best_val_loss)
    metrics["best_epoch"] = float(hist.best_epoch)
    metrics["proxy_lambda"] = float(lam)
    return RunResult("se_spatial", mr, q, cfg.variant, cfg.ncl, seed, metrics,
                     models.param_count(params), time.perf_counter() - t0,
                     curve)


def _class_samples(cfg: ExperimentConfig, seed: int):
    """Synthetic multi-class data: one low-dim subspace per class + noise."""
    rng = _sub_rng(seed, _K_DATA)
    r = 5
    per = cfg.train_per_class + cfg.val_per_class + cfg.test_per_class
    raws, labels = [], []
    for _ in range(cfg.classes):
        basis, _ = np.linalg.qr(rng.standard_normal((cfg.raw_dim, r)))
        coeff = rng.standard_normal((per, r))
        batch = coeff @ basis.T + cfg.class_noise * rng.standard_normal(
            (per, cfg.raw_dim))
        raws.append(batch)
        labels.append(np.full(per, len(raws) - 1, dtype=np.int64))
    raw = np.concatenate(raws)
    lab = np.concatenate(labels)
    tr, vl, te = [], [], []
    for c in range(cfg.classes):
        base = c * per
        tr.extend(range(base, base + cfg.train_per_class))
        vl.extend(range(base + cfg.train_per_class,
                        base + cfg.train_per_class + cfg.val_per_class))
        te.extend(range(base + per - cfg.test_per_class, base + per))
    return raw, lab, np.array(tr), np.array(vl), np.array(te)


def _crc_accuracy(D, feats, labels, lam, groups) -> float:
    hits = sum(1 for i in range(feats.shape[0])
               if sparse.crc_classify(D, feats[i], lam, groups)[0] == labels[i])
    return hits / feats.shape[0]


def _run_rbc_classify(cfg: ExperimentConfig, mr: float, q: int,
                      seed: int) -> RunResult:
    t0 = time.perf_counter()
    unit = f"(pipeline=rbc_classify, mr={mr}, q={q}, seed={seed})"
    g = (cfg.block[0], cfg.block[1])
    m = int(round(mr * cfg.raw_dim))
    n_dict = cfg.classes * cfg.atoms_per_class
    if not (1 <= m < n_dict):
        raise ConfigError(
            f"mr={mr} gives m={m}; need 1 <= m < {n_dict} dictionary atoms")

    with _stage("dataset", unit):
        raw, lab, tr, vl, te = _class_samples(cfg, seed)
        mu = raw[tr].mean(axis=0)
        centered = raw - mu

    with _stage("dictionary", unit):
        A = pca_projection(centered[tr], m)
        feats = centered @ A.T
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.where(norms > 0, norms, 1.0)
        atoms = np.concatenate(
            [tr[lab[tr] == c][:cfg.atoms_per_class] for c in range(cfg.classes)])
        D, groups, map_shape = sparse.build_classification_dictionary(
            centered[atoms], lab[atoms], A, g)
        problem = sparse.SensingProblem(D)
        lam = cfg.proxy_lambda
        if lam != lam:
            lam = 1e-2          # no regression target for codes; fixed ridge
        if cfg.proxy == "mc":
            lam = 0.0
        B = sparse.denoiser_matrix(problem, cfg.proxy, lam)

    def block_mask(c: int) -> np.ndarray:
        vmap = np.zeros(map_shape)
        vmap.reshape(-1)[groups[c]] = 1.0
        return vmap

    with _stage("train", unit):
        head = "hybrid" if cfg.loss == "hybrid" else "classification"
        spec = models.ModelSpec(
            variant=cfg.variant, q=q, input_shape=map_shape, head=head,
            group=g, widths=tuple(cfg.widths))
        if cfg.loss == "hybrid":
            loss = training.LossSpec("hybrid", lambda_c=cfg.lambda_c)
        else:
            loss = training.LossSpec("group_l2", lambda_g=cfg.lambda_g,
                                     class_groups=groups)

        def samples(index: np.ndarray) -> list:
            out = []
            for i in index:
                xmap = (B @ feats[i]).reshape(map_shape)
                vmap = block_mask(int(lab[i]))
                if cfg.loss == "hybrid":
                    onehot = np.zeros(cfg.classes)
                    onehot[lab[i]] = 1.0
                    out.append((xmap, vmap, onehot))
                else:
                    out.append((xmap, vmap))
            return out

        dataset = {"train": samples(tr), "val": samples(vl)}
        params, hist = models.train_model(
            spec, dataset, loss, cfg.epochs,
            seed=_sub_seed(seed, _K_TRAIN, q, 0),
            batch_size=cfg.batch_size)

    with _stage("evaluate", unit):
        hits = 0
        for i in te:
            _, c_hat = models.infer(params, (B @ feats[i]).reshape(map_shape))
            hits += int(np.argmax(c_hat) == lab[i])
        accuracy = hits / len(te)
        crc_lam = cfg.crc_lambda
        if crc_lam != crc_lam:                          # nan -> grid search
            scored = [(_crc_accuracy(D, feats[vl], lab[vl], l, groups), l)
                      for l in _LAMBDA_GRID]
            crc_lam = max(scored, key=lambda t: (t[0], -t[1]))[1]
        crc_acc = _crc_accuracy(D, feats[te], lab[te], crc_lam, groups)

    metrics = {
        "accuracy": float(accuracy),
        "crc_accuracy": float(crc_acc),
        "chance": 1.0 / cfg.classes,
        "crc_lambda": float(crc_lam),
        "best_val_loss": float(hist.best_val_loss),
        "proxy_lambda": float(lam),
    }
    return RunResult("rbc_classify", mr, q, cfg.variant, False, seed, metrics,
                     models.param_count(params), time.perf_counter() - t0)


def _grad_prob_truth(S: np.ndarray, tau1: float) -> np.ndarray:
    gx, gy = recon.grad_ops(S)
    return np.stack([(np.abs(gx) > tau1).astype(np.float64),
                     (np.abs(gy) > tau1).astype(np.float64)])


def _run_cs_tv(cfg: ExperimentConfig, mr: float, q: int,
               seed: int) -> RunResult:
    t0 = time.perf_counter()
    unit = f"(pipeline=cs_tv, mr={mr}, q={q}, seed={seed})"
    side = cfg.side or 64
    n = side * side
    m = int(round(mr * n))
    tv_cfg = recon.TVConfig(lam=cfg.tv_lambda, rho=cfg.tv_rho,
                            relax_alpha=cfg.tv_alpha, abs_tol=cfg.tv_abs_tol,
                            rel_tol=cfg.tv_rel_tol, max_it=cfg.tv_max_it)

    with _stage("mask", unit):
        mask = recon.semi_random_mask(side, m,
                                      _sub_seed(seed, _K_MASK, _mr_key(mr)))

    params = None
    if cfg.weights == "trained":
        with _stage("train", unit):
            count = cfg.train_count + cfg.val_count
            phantoms = [synth_phantom(side, _sub_seed(seed, _K_DATA, i))
                        for i in range(count)]
            pairs = []
            for S in phantoms:
                zf = recon.zero_filling(recon.fourier_measure(S, mask), mask)
                pairs.append((np.stack(recon.grad_ops(zf)),
                              _grad_prob_truth(S, cfg.tau1)))
            spec = models.ModelSpec(
                variant=cfg.variant, q=q, input_shape=(side, side),
                widths=tuple(cfg.widths), channels=2)
            dataset = {"train": pairs[:cfg.train_count],
                       "val": pairs[cfg.train_count:]}
            params, _ = models.train_model(
                spec, dataset, training.LossSpec("mse_mask"), cfg.epochs,
                seed=_sub_seed(seed, _K_TRAIN, q, 2),
                batch_size=cfg.batch_size)

    with _stage("reconstruct", unit):
        rows = {k: [] for k in
                ("psnr_zf", "psnr_tv", "psnr_wtv", "nmse_zf", "nmse_tv",
                 "nmse_wtv", "tv_iterations", "wtv_iterations")}
        tv_conv, wtv_conv = [], []
        truth_maps, prob_maps = [], []
        for i in range(cfg.phantom_count):
            S0 = synth_phantom(side, _sub_seed(seed, _K_PHANTOM, i))
            y = recon.fourier_measure(S0, mask)
            zf = recon.zero_filling(y, mask)
            p_zf, e_zf = sparse.psnr_nmse(S0, zf)
            res_tv = recon.admm_weighted_tv(y, mask, None, tv_cfg)
            p_tv, e_tv = sparse.psnr_nmse(S0, res_tv.S)
            rows["psnr_zf"].append(p_zf)
            rows["nmse_zf"].append(e_zf)
            rows["psnr_tv"].append(p_tv)
            rows["nmse_tv"].append(e_tv)
            rows["tv_iterations"].append(float(res_tv.iterations))
            tv_conv.append(res_tv.converged)
            if cfg.weights == "none":
                continue
            if cfg.weights == "oracle":
                p_pair = _grad_prob_truth(S0, cfg.tau1)
            else:
                p_pair = np.asarray(
                    models.infer(params, np.stack(recon.grad_ops(zf))))
            truth_maps.append(_grad_prob_truth(S0, cfg.tau1))
            prob_maps.append((p_pair > 0.5).astype(np.float64))
            gamma = recon.weights_from_prob(p_pair, cfg.epsilon)
            res_w = recon.admm_weighted_tv(y, mask, gamma, tv_cfg)
            p_w, e_w = sparse.psnr_nmse(S0, res_w.S)
            rows["psnr_wtv"].append(p_w)
            rows["nmse_wtv"].append(e_w)
            rows["wtv_iterations"].append(float(res_w.iterations))
            wtv_conv.append(res_w.converged)

    metrics = {k: float(np.mean(vals)) for k, vals in rows.items() if vals}
    metrics["tv_converged_frac"] = float(np.mean(tv_conv))
    if wtv_conv:
        metrics["wtv_converged_frac"] = float(np.mean(wtv_conv))
    if truth_maps:
        se = _macro_se(truth_maps, prob_maps)
        metrics["grad_f1"] = se.f1
        metrics["grad_precision"] = se.precision
        metrics["grad_sensitivity"] = se.sensitivity
    return RunResult("cs_tv", mr, q, cfg.variant, False, seed, metrics,
                     models.param_count(params) if params is not None else 0,
                     time.perf_counter() - t0)


_PIPELINE_FNS = {
    "se_spatial": _run_se_spatial,
    "rbc_classify": _run_rbc_classify,
    "cs_tv": _run_cs_tv,
}


# ---------------------------------------------------------------------------
# experiment orchestration and reports


def _worker_count(n_units: int) -> int:
    raw = os.environ.get("OSEN_THREADS", "").strip()
    if not raw:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"OSEN_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError("OSEN_THREADS must be >= 1")
    return min(cap, n_units)


def _run_unit(args) -> RunResult:
    cfg, mr, q, seed = args
    return _PIPELINE_FNS[cfg.pipeline](cfg, mr, q, seed)


def run_experiment(cfg: ExperimentConfig, progress=None) -> dict:
    """Run every (mr, Q, seed) unit and write the report files.

    Units are independent; OSEN_THREADS > 1 runs them in parallel worker
    processes.  Report assembly is serialized in config order either way.
    Returns ``{"runs": [RunResult...], "echo": str, "outdir": Path}``.
    """
    validate_config(cfg)
    units = [(cfg, mr, q, seed)
             for mr in cfg.mr for q in cfg.q for seed in cfg.seeds]
    workers = _worker_count(len(units))
    if workers > 1:
        import concurrent.futures as cf
        ctx = __import__("multiprocessing").get_context("fork")
        with cf.ProcessPoolExecutor(max_workers=workers,
                                    mp_context=ctx) as pool:
            runs = list(pool.map(_run_unit, units))
    else:
        runs = []
        for u in units:
            runs.append(_run_unit(u))
            if progress is not None:
                progress(runs[-1])
    results = {"runs": runs, "echo": config_echo(cfg),
               "outdir": Path(cfg.outdir)}
    emit_report(results, cfg.outdir)
    return results


def _fmt_cell(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _metric_columns(runs: Sequence[RunResult]) -> List[str]:
    cols: List[str] = []
    for r in runs:
        for k in r.metrics:
            if k not in cols:
                cols.append(k)
    return cols


def _group_key(r: RunResult):
    return (r.pipeline, r.mr, r.q, r.variant, r.ncl)


def emit_report(results: dict, outdir) -> None:
    """Write metrics.csv, curves.csv, timings.csv, and the config echo.

    metrics.csv holds one row per run plus one seed-averaged row per
    (pipeline, mr, Q, variant, ncl) group, in config order, every float
    serialized with full round-trip precision so identical runs produce
    identical bytes.  Wall-clock goes to timings.csv only.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    runs: List[RunResult] = list(results["runs"])
    mcols = _metric_columns(runs)
    base = ["pipeline", "mr", "q", "variant", "ncl", "seed"]

    groups: Dict[tuple, List[RunResult]] = {}
    order: List[tuple] = []
    for r in runs:
        k = _group_key(r)
        if k not in groups:
            groups[k] = []
            order.append(k)
        groups[k].append(r)

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(base + mcols + ["param_count"])
        for r in runs:
            row = [r.pipeline, _fmt_cell(r.mr), str(r.q), r.variant,
                   _fmt_cell(r.ncl), str(r.seed)]
            row += [_fmt_cell(r.metrics.get(c, "")) for c in mcols]
            row.append(str(r.param_count))
            w.writerow(row)
        for k in order:
            grp = groups[k]
            if len(grp) < 2:
                continue
            row = [grp[0].pipeline, _fmt_cell(grp[0].mr), str(grp[0].q),
                   grp[0].variant, _fmt_cell(grp[0].ncl), "mean"]
            for c in mcols:
                vals = [g.metrics[c] for g in grp if c in g.metrics]
                row.append(_fmt_cell(float(np.mean(vals))) if len(vals) ==
                           len(grp) else "")
            counts = {g.param_count for g in grp}
            row.append(str(grp[0].param_count) if len(counts) == 1 else "")
            w.writerow(row)

    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(base + ["snr_db", "f1"])
        for r in runs:
            for snr, f1 in r.curve:
                w.writerow([r.pipeline, _fmt_cell(r.mr), str(r.q), r.variant,
                            _fmt_cell(r.ncl), str(r.seed), _fmt_cell(snr),
                            _fmt_cell(f1)])
        for k in order:
            grp = groups[k]
            if len(grp) < 2 or not grp[0].curve:
                continue
            for si in range(len(grp[0].curve)):
                snr = grp[0].curve[si][0]
                f1s = [g.curve[si][1] for g in grp]
                w.writerow([grp[0].pipeline, _fmt_cell(grp[0].mr),
                            str(grp[0].q), grp[0].variant,
                            _fmt_cell(grp[0].ncl), "mean", _fmt_cell(snr),
                            _fmt_cell(float(np.mean(f1s)))])

    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(base + ["wall_time_s"])
        for r in runs:
            w.writerow([r.pipeline, _fmt_cell(r.mr), str(r.q), r.variant,
                        _fmt_cell(r.ncl), str(r.seed),
                        _fmt_cell(r.wall_time)])

    (out / "config.echo.txt").write_text(results["echo"])


# ---------------------------------------------------------------------------
# command-line entry points


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    def progress(r: RunResult) -> None:
        tail = ", ".join(f"{k}={v:.4f}" for k, v in list(r.metrics.items())[:3])
        print(f"[{r.pipeline}] mr={r.mr} q={r.q} seed={r.seed} "
              f"({r.wall_time:.1f}s) {tail}", flush=True)
    try:
        results = run_experiment(cfg, progress=progress)
    except PipelineFailure as e:
        sys.stderr.write(f"error: {e}\n\n-- config echo --\n{config_echo(cfg)}")
        return 2
    print(f"wrote {results['outdir'] / 'metrics.csv'}")
    return 0


def _nudge_shifts(nodes, rng: np.random.Generator) -> None:
    # Bilinear interpolation is piecewise-smooth with kinks at integer
    # offsets, and fresh models start every shift at exactly 0 — a kink.
    # Central differences straddle it and disagree with the (one-sided)
    # analytic derivative, so the audit probes a generic off-knot point.
    for node in nodes:
        if node.kind in ("op", "op_t"):
            s = node.params.shifts
            s += rng.uniform(0.08, 0.42, s.shape) * rng.choice((-1.0, 1.0),
                                                               s.shape)


def _cmd_gradcheck(args) -> int:
    rng_seed = args.seed
    spec = models.ModelSpec(variant="osen1", q=args.q,
                            input_shape=(args.side, args.side),
                            widths=(args.width1, args.width2))
    params = models.build(spec, seed=rng_seed)
    rng = _sub_rng(rng_seed, _K_DATA)
    _nudge_shifts(params.nodes, rng)
    batch = [(rng.uniform(-1, 1, (1, args.side, args.side)),
              (rng.uniform(0, 1, (args.side, args.side)) > 0.5)
              .astype(np.float64))
             for _ in range(2)]
    report = training.grad_check(params, batch, training.LossSpec("mse_mask"),
                                 h=args.h, sample=args.samples, seed=rng_seed)
    print(f"operational layers: {report.n_checked} entries, "
          f"max rel err {report.max_rel_err:.3e}")
    ok = report.passed

    gop_node = training.LayerNode(
        "gop", training.init_selfgop_params(12, 5, args.q,
                                            rng=_sub_rng(rng_seed, 2)))
    gop_model = [gop_node,
                 training.LayerNode("reshape", shape=(3, 4)),
                 training.LayerNode("op", training.init_operational_params(
                     1, 1, args.q, activation="sigmoid",
                     rng=_sub_rng(rng_seed, 3)))]
    _nudge_shifts(gop_model, rng)
    gbatch = [(rng.uniform(-1, 1, 5),
               (rng.uniform(0, 1, (3, 4)) > 0.5).astype(np.float64))
              for _ in range(2)]
    greport = training.grad_check(gop_model, gbatch,
                                  training.LossSpec("mse_mask"),
                                  h=args.h, sample=args.samples,
                                  seed=rng_seed)
    print(f"compressive front end: {greport.n_checked} entries, "
          f"max rel err {greport.max_rel_err:.3e}")
    ok = ok and greport.passed
    for line in (report.violations + greport.violations)[:20]:
        print(f"  FAIL {line}")
    print("gradient check PASSED" if ok else "gradient check FAILED")
    return 0 if ok else 2


def _cmd_paramcount(args) -> int:
    side = args.side
    m = None
    denoiser = None
    if args.ncl:
        m = int(round(args.mr * side * side))
        denoiser = np.zeros((side * side, m))
    spec = models.ModelSpec(variant=args.variant, q=args.q, ncl=args.ncl,
                            input_shape=(side, side), m=m,
                            widths=(args.width1, args.width2))
    params = models.build(spec, seed=0, denoiser=denoiser)
    print(models.param_count(params))
    return 0


def _cmd_recon(args) -> int:
    mask = recon.load_mask(args.mask)
    side = mask.n_side
    if args.image:
        img = _read_pgm(args.image)
        if img.shape != (side, side):
            img = _resize_bilinear(img, side, side)
        S0 = img
    else:
        S0 = synth_phantom(side, args.phantom_seed)
    y = recon.fourier_measure(S0, mask)
    zf = recon.zero_filling(y, mask)
    cfg = recon.TVConfig(lam=args.lam, rho=args.rho)
    res = recon.admm_weighted_tv(y, mask, None, cfg)
    p_zf, _ = sparse.psnr_nmse(S0, zf)
    p_tv, _ = sparse.psnr_nmse(S0, res.S)
    print(f"zero-filling PSNR: {p_zf:.2f} dB")
    print(f"TV PSNR:           {p_tv:.2f} dB "
          f"({res.iterations} iterations, converged={res.converged})")
    best = res.S
    if args.weights:
        if args.weights == "oracle":
            p_pair = _grad_prob_truth(S0, 0.04)
        else:
            p_pair = np.load(args.weights)
        gamma = recon.weights_from_prob(p_pair, args.epsilon)
        res_w = recon.admm_weighted_tv(y, mask, gamma, cfg)
        p_w, _ = sparse.psnr_nmse(S0, res_w.S)
        print(f"weighted TV PSNR:  {p_w:.2f} dB "
              f"({res_w.iterations} iterations, converged={res_w.converged})")
        best = res_w.S
    if args.out:
        np.save(args.out, best)
        print(f"saved reconstruction to {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="osen",
        description="Operational support estimator experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a config-driven experiment")
    p.add_argument("config", help="path to a flat key = value config file")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--q", type=int, default=3)
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--width1", type=int, default=8)
    p.add_argument("--width2", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=None,
                   help="check a random subset of each tensor (default: all)")
    p.add_argument("--h", type=float, default=1e-4,
                   help="finite-difference step")

    p = sub.add_parser("paramcount", help="print the trainable budget")
    p.add_argument("--variant", choices=("osen1", "osen2"), default="osen1")
    p.add_argument("--q", type=int, default=3)
    p.add_argument("--ncl", action="store_true")
    p.add_argument("--mr", type=float, default=0.05,
                   help="measurement rate fixing the front-end width (ncl)")
    p.add_argument("--side", type=int, default=28)
    p.add_argument("--width1", type=int, default=48)
    p.add_argument("--width2", type=int, default=24)

    p = sub.add_parser("recon", help="reconstruct one image from a mask file")
    p.add_argument("--mask", required=True, help="sampling mask file")
    p.add_argument("--image", default="", help="graymap to measure "
                   "(default: a seeded synthetic phantom)")
    p.add_argument("--phantom-seed", type=int, default=0)
    p.add_argument("--weights", default="", help="'oracle' or a .npy file "
                   "holding a (2, n, n) gradient-probability stack")
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--out", default="", help="save the best recon as .npy")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "paramcount":
            return _cmd_paramcount(args)
        if args.command == "recon":
            return _cmd_recon(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return 1
    except PipelineFailure as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    except (NumericsError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    except Exception as e:                    # any other runtime failure
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
