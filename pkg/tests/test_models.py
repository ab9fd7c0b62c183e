"""Architecture builds, parameter budgets, training loop, persistence."""

import numpy as np
import pytest

from osen.layers import selfgop_forward
from osen.models import (ModelSpec, binarize, build, infer, load_params,
                         param_count, save_params, train_model)
from osen.numerics import NumericsError
from osen.training import (LayerNode, LossSpec, batch_loss,
                           init_operational_params)


def _toy_dataset(rng, n_train=6, n_val=3, side=8):
    def mk(k):
        out = []
        for _ in range(k):
            x = rng.standard_normal((side, side))
            v = (rng.uniform(size=(side, side)) < 0.3).astype(float)
            out.append((x, v))
        return out
    return {"train": mk(n_train), "val": mk(n_val)}


# ---------------------------------------------------------------------------
# spec validation


def test_model_spec_validation():
    with pytest.raises(NumericsError):
        ModelSpec(variant="osen3")
    with pytest.raises(NumericsError):
        ModelSpec(head="regression")
    with pytest.raises(NumericsError):
        ModelSpec(q=0)
    with pytest.raises(NumericsError):
        ModelSpec(channels=0)
    with pytest.raises(NumericsError):
        ModelSpec(channels=2, head="hybrid", group=(2, 2))
    with pytest.raises(NumericsError):
        ModelSpec(input_shape=(3, 8))
    with pytest.raises(NumericsError):
        ModelSpec(variant="osen2", input_shape=(9, 8))
    with pytest.raises(NumericsError):
        ModelSpec(ncl=True)                      # m required
    with pytest.raises(NumericsError):
        ModelSpec(head="hybrid")                 # group required
    with pytest.raises(NumericsError):
        ModelSpec(head="hybrid", group=(3, 4), input_shape=(8, 8))
    ModelSpec(head="hybrid", group=(2, 4), input_shape=(8, 8))


# ---------------------------------------------------------------------------
# parameter budgets


def _op_params(cout, cin, q):
    return cout * cin * q * 9 + cout * q + cout * 2


def test_param_count_matches_layer_arithmetic():
    q = 3
    want1 = _op_params(48, 1, q) + _op_params(24, 48, q) + _op_params(1, 24, q)
    got1 = param_count(build(ModelSpec(variant="osen1", q=q), seed=0))
    assert got1 == want1 == 33413
    want2 = (_op_params(48, 1, q) + _op_params(24, 48, q)
             + _op_params(24, 24, q) + _op_params(1, 24, q))
    got2 = param_count(build(ModelSpec(variant="osen2", q=q), seed=0))
    assert got2 == want2 == 49085


def test_param_count_ncl_front_end():
    q, m, side = 3, 39, 28
    n = side * side
    spec = ModelSpec(variant="osen1", q=q, ncl=True, m=m)
    params = build(spec, seed=0, denoiser=np.zeros((n, m)))
    assert param_count(params) == 33413 + q * (n * m + n) == 127493


def test_param_count_respects_channels():
    q = 2
    spec = ModelSpec(variant="osen1", q=q, channels=2)
    want = _op_params(48, 2, q) + _op_params(24, 48, q) + _op_params(2, 24, q)
    assert param_count(build(spec, seed=0)) == want


# ---------------------------------------------------------------------------
# builds


def test_build_is_seed_deterministic():
    spec = ModelSpec(widths=(4, 3), input_shape=(8, 8))
    a = build(spec, seed=5)
    b = build(spec, seed=5)
    c = build(spec, seed=6)
    for na, nb in zip(a.nodes, b.nodes):
        assert np.array_equal(na.params.W, nb.params.W)
    assert not np.array_equal(a.nodes[0].params.W, c.nodes[0].params.W)
    # initialization policy: zero shifts and biases everywhere
    for node in a.nodes:
        assert not node.params.b.any()
        assert not node.params.shifts.any()


def test_ncl_front_end_reproduces_linear_estimate():
    rng = np.random.default_rng(50)
    side, m = 8, 10
    B = rng.standard_normal((side * side, m))
    spec = ModelSpec(variant="osen1", q=3, ncl=True, m=m,
                     input_shape=(side, side), widths=(3, 2))
    params = build(spec, seed=1, denoiser=B)
    y = rng.standard_normal(m)
    front = selfgop_forward(y, params.nodes[0].params)
    assert np.allclose(front, B @ y, atol=1e-14)
    with pytest.raises(NumericsError):
        build(spec, seed=1)                      # denoiser required
    with pytest.raises(NumericsError):
        build(spec, seed=1, denoiser=np.zeros((side * side, m + 1)))


def test_infer_shapes_and_errors():
    spec = ModelSpec(widths=(3, 2), input_shape=(8, 8))
    params = build(spec, seed=2)
    rng = np.random.default_rng(51)
    out = infer(params, rng.standard_normal((8, 8)))     # 2-D lift
    assert out.shape == (8, 8)       # singleton channel removed on output
    assert ((0 <= out) & (out <= 1)).all()               # sigmoid output
    with pytest.raises(NumericsError):
        infer(params, rng.standard_normal((9, 8)))
    spec_ncl = ModelSpec(widths=(3, 2), input_shape=(8, 8), ncl=True, m=6)
    pn = build(spec_ncl, seed=2, denoiser=np.zeros((64, 6)))
    with pytest.raises(NumericsError):
        infer(pn, rng.standard_normal(7))
    spec_cls = ModelSpec(widths=(3, 2), input_shape=(8, 8), head="hybrid",
                         group=(4, 4))
    pc = build(spec_cls, seed=2)
    v_map, c_hat = infer(pc, rng.standard_normal((8, 8)))
    assert v_map.shape == (8, 8) and c_hat.shape == (4,)
    assert np.isclose(c_hat.sum(), 1.0)


def test_infer_two_channel_maps():
    spec = ModelSpec(widths=(3, 2), input_shape=(8, 8), channels=2)
    params = build(spec, seed=3)
    out = infer(params, np.random.default_rng(52).standard_normal((2, 8, 8)))
    assert out.shape == (2, 8, 8)
    with pytest.raises(NumericsError):
        infer(params, np.zeros((8, 8)))          # no 2-D lift with 2 channels


def test_binarize_strict_threshold():
    p = np.array([0.5, 0.5 + 1e-12, 0.49, 1.0])
    assert np.array_equal(binarize(p), [0, 1, 0, 1])
    assert np.array_equal(binarize(p, tau=0.49), [1, 1, 0, 1])


# ---------------------------------------------------------------------------
# training loop


def test_train_model_is_bit_reproducible():
    rng = np.random.default_rng(53)
    dataset = _toy_dataset(rng)
    spec = ModelSpec(widths=(3, 2), input_shape=(8, 8))
    loss = LossSpec(kind="mse_mask")
    p1, h1 = train_model(spec, dataset, loss, epochs=2, seed=9)
    p2, h2 = train_model(spec, dataset, loss, epochs=2, seed=9)
    p3, _ = train_model(spec, dataset, loss, epochs=2, seed=10)
    for a, b in zip(p1.nodes, p2.nodes):
        assert np.array_equal(a.params.W, b.params.W)
        assert np.array_equal(a.params.shifts, b.params.shifts)
    assert h1.train_loss == h2.train_loss
    assert h1.val_loss == h2.val_loss
    assert not np.array_equal(p1.nodes[0].params.W, p3.nodes[0].params.W)
    assert p1.norm_scale == p2.norm_scale


def test_train_model_keeps_validation_best():
    rng = np.random.default_rng(54)
    dataset = _toy_dataset(rng)
    spec = ModelSpec(widths=(3, 2), input_shape=(8, 8))
    loss = LossSpec(kind="mse_mask")
    params, hist = train_model(spec, dataset, loss, epochs=4, seed=11)
    assert len(hist.train_loss) == len(hist.val_loss) == len(hist.val_f1) == 4
    assert hist.best_val_loss == min(hist.val_loss)
    assert hist.best_epoch == int(np.argmin(hist.val_loss))
    # the returned parameters are the checkpoint, not the final state
    scaled = [(np.asarray(x, dtype=float)[None] * params.norm_scale, v)
              for x, v in dataset["val"]]
    got = batch_loss(params, scaled, loss) / len(scaled)
    assert np.isclose(got, hist.best_val_loss, atol=1e-12)


def test_train_model_freeze_shifts():
    rng = np.random.default_rng(55)
    dataset = _toy_dataset(rng, n_train=4, n_val=2)
    spec = ModelSpec(widths=(3, 2), input_shape=(8, 8))
    params, _ = train_model(spec, dataset, LossSpec(kind="mse_mask"),
                            epochs=1, seed=12, freeze_shifts=True)
    for node in params.nodes:
        assert not node.params.shifts.any()
    with pytest.raises(NumericsError):
        train_model(spec, {"train": [], "val": []}, LossSpec(kind="mse_mask"),
                    epochs=1, seed=0)


def test_train_model_progress_callback():
    rng = np.random.default_rng(56)
    dataset = _toy_dataset(rng, n_train=4, n_val=2)
    spec = ModelSpec(widths=(3, 2), input_shape=(8, 8))
    seen = []
    train_model(spec, dataset, LossSpec(kind="mse_mask"), epochs=3, seed=13,
                progress=lambda epoch, hist: seen.append(epoch))
    assert seen == [0, 1, 2]


# ---------------------------------------------------------------------------
# persistence


def _trained_toy(seed=57, **spec_kw):
    rng = np.random.default_rng(seed)
    dataset = _toy_dataset(rng, n_train=4, n_val=2)
    spec = ModelSpec(widths=(3, 2), input_shape=(8, 8), **spec_kw)
    params, _ = train_model(spec, dataset, LossSpec(kind="mse_mask"),
                            epochs=1, seed=seed)
    return params


def _assert_same_params(a, b):
    assert a.norm_scale == b.norm_scale
    assert a.spec == b.spec
    for na, nb in zip(a.nodes, b.nodes):
        assert na.kind == nb.kind
        if na.params is None:
            continue
        assert np.array_equal(na.params.W, nb.params.W)
        assert np.array_equal(na.params.b, nb.params.b)
        if hasattr(na.params, "shifts"):
            assert np.array_equal(na.params.shifts, nb.params.shifts)


def test_save_load_round_trip_bit_exact(tmp_path):
    params = _trained_toy()
    path = tmp_path / "weights.bin"
    save_params(params, path)
    loaded = load_params(path)
    _assert_same_params(params, loaded)
    # and the loaded model computes the identical forward pass
    x = np.random.default_rng(58).standard_normal((8, 8))
    assert np.array_equal(infer(params, x), infer(loaded, x))


def test_save_load_two_channel_round_trip(tmp_path):
    rng = np.random.default_rng(59)
    side = 8
    samples = [(rng.standard_normal((2, side, side)),
                (rng.uniform(size=(2, side, side)) < 0.3).astype(float))
               for _ in range(4)]
    dataset = {"train": samples[:3], "val": samples[3:]}
    spec = ModelSpec(widths=(3, 2), input_shape=(side, side), channels=2)
    params, _ = train_model(spec, dataset, LossSpec(kind="mse_mask"),
                            epochs=1, seed=60)
    path = tmp_path / "two_channel.bin"
    save_params(params, path)
    loaded = load_params(path)
    assert loaded.spec.channels == 2
    _assert_same_params(params, loaded)


def test_load_rejects_corruption(tmp_path):
    params = _trained_toy()
    path = tmp_path / "weights.bin"
    save_params(params, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "corrupt.bin"
    bad.write_bytes(bytes(blob))
    with pytest.raises(NumericsError, match="checksum"):
        load_params(bad)


def test_load_rejects_truncation_and_junk(tmp_path):
    params = _trained_toy()
    path = tmp_path / "weights.bin"
    save_params(params, path)
    blob = path.read_bytes()
    short = tmp_path / "short.bin"
    short.write_bytes(blob[: len(blob) // 3])
    with pytest.raises(NumericsError):
        load_params(short)
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00" * 64)
    with pytest.raises(NumericsError, match="not a weight container"):
        load_params(junk)


def test_load_expect_guards_architecture(tmp_path):
    params = _trained_toy()
    path = tmp_path / "weights.bin"
    save_params(params, path)
    load_params(path, expect=params.spec)
    other = ModelSpec(widths=(3, 2), input_shape=(8, 8), q=2)
    with pytest.raises(NumericsError, match="does not match"):
        load_params(path, expect=other)


# ---------------------------------------------------------------------------
# pinned count and training facts


def test_param_count_single_layer_hand_formula():
    # one 1->1 operational layer, 3x3, two orders: 9*2 + 2 + 2 = 22
    rng = np.random.default_rng(70)
    node = LayerNode("op", init_operational_params(1, 1, 2, rng=rng),
                     shift_bound=3.0)
    assert param_count([node]) == 22


def test_infer_zero_input_zero_bias_is_half():
    params = build(ModelSpec(widths=(3, 2), input_shape=(8, 8)), seed=71)
    for node in params.nodes:
        node.params.b[...] = 0.0
    v = infer(params, np.zeros((8, 8)))
    assert np.array_equal(v, np.full((8, 8), 0.5))


def test_train_model_one_epoch_decreases_loss():
    rng = np.random.default_rng(72)
    dataset = _toy_dataset(rng, n_train=10, n_val=3)
    spec = ModelSpec(widths=(3, 2), input_shape=(8, 8))
    loss = LossSpec(kind="mse_mask")
    params, hist = train_model(spec, dataset, loss, epochs=1, seed=13)

    init = build(spec, seed=13)
    init.norm_scale = params.norm_scale
    scaled = [(np.asarray(x, dtype=float)[None] * params.norm_scale, v)
              for x, v in dataset["train"]]
    loss_init = batch_loss(init, scaled, loss) / len(scaled)
    loss_trained = batch_loss(params, scaled, loss) / len(scaled)
    assert loss_trained < loss_init
