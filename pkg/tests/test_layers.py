"""Layer forward tests: fused kernels vs composed-primitive oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate2d

from osen.layers import (OperationalLayerParams, SelfGOPParams,
                         activation_grad, apply_activation,
                         grouped_avgpool_softmax, maxpool2, maxpool2_backward,
                         operational_forward, operational_forward_reference,
                         selfgop_forward, transposed_operational_forward,
                         upsample2_zero)
from osen.numerics import (NumericsError, bilinear_shift, conv2d_same,
                           hadamard_pow)


# ---------------------------------------------------------------------------
# oracles


def op_forward_composed(x, p):
    """Operational layer rebuilt tap-by-tap from the numerics primitives."""
    cout, cin, Q = p.c_out, p.c_in, p.q_order
    H, W = x.shape[1], x.shape[2]
    z = np.zeros((cout, H, W))
    for k in range(cout):
        acc = np.zeros((H, W))
        for c in range(cin):
            shifted = bilinear_shift(x[c], p.shifts[k, 0], p.shifts[k, 1])
            for q in range(1, Q + 1):
                acc += conv2d_same(hadamard_pow(shifted, q), p.W[k, c, q - 1])
        z[k] = acc + p.b[k].sum()
    return apply_activation(z, p.activation)


def selfgop_composed(y, p):
    z = np.zeros(p.n_out)
    for q in range(p.q_order):
        for i in range(p.n_out):
            z[i] += p.b[q, i]
            for j in range(y.shape[0]):
                z[i] += p.W[q, i, j] * y[j] ** (q + 1)
    return apply_activation(z, p.activation)


def random_op_params(rng, cout, cin, q, f=3, activation="tanh",
                     shift_scale=2.0):
    return OperationalLayerParams(
        W=rng.standard_normal((cout, cin, q, f, f)) * 0.5,
        b=rng.standard_normal((cout, q)) * 0.1,
        shifts=rng.uniform(-shift_scale, shift_scale, (cout, 2)),
        activation=activation)


# ---------------------------------------------------------------------------
# operational layers


@pytest.mark.parametrize("cout,cin,q,hw", [
    (1, 1, 1, (6, 6)),
    (2, 1, 3, (5, 8)),
    (3, 2, 2, (7, 5)),
    (2, 3, 3, (8, 8)),
])
def test_operational_forward_matches_composed_oracle(cout, cin, q, hw):
    rng = np.random.default_rng(10 + cout + 10 * cin + 100 * q)
    x = rng.standard_normal((cin,) + hw)
    p = random_op_params(rng, cout, cin, q)
    got = operational_forward(x, p)
    assert np.allclose(got, op_forward_composed(x, p), atol=1e-12)
    assert np.allclose(got, operational_forward_reference(x, p), atol=1e-12)


def test_operational_forward_extreme_shifts():
    # shifts that push the window entirely off the map must read pure zeros
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 6, 6))
    for s in (-7.0, -5.5, 5.5, 7.0, 6.0):
        p = random_op_params(rng, 2, 1, 2)
        p.shifts[:] = [[s, 0.3], [0.1, s]]
        assert np.allclose(operational_forward(x, p),
                           op_forward_composed(x, p), atol=1e-12)


def test_operational_forward_q1_zero_shift_is_plain_convolution():
    rng = np.random.default_rng(12)
    cin, cout = 3, 2
    x = rng.standard_normal((cin, 9, 7))
    p = random_op_params(rng, cout, cin, 1, activation="none")
    p.shifts[:] = 0.0
    got = operational_forward(x, p)
    want = np.zeros_like(got)
    for k in range(cout):
        for c in range(cin):
            want[k] += correlate2d(x[c], p.W[k, c, 0], mode="same",
                                   boundary="fill")
        want[k] += p.b[k].sum()
    assert np.allclose(got, want, atol=1e-12)


def test_operational_forward_general_kernel_size():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 8, 8))
    p = random_op_params(rng, 2, 2, 2, f=5)
    assert np.allclose(operational_forward(x, p), op_forward_composed(x, p),
                       atol=1e-12)


def test_operational_forward_neuron_permutation_equivariance():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((2, 6, 6))
    p = random_op_params(rng, 4, 2, 2)
    perm = np.array([2, 0, 3, 1])
    p2 = OperationalLayerParams(W=p.W[perm], b=p.b[perm],
                                shifts=p.shifts[perm],
                                activation=p.activation)
    assert np.allclose(operational_forward(x, p2),
                       operational_forward(x, p)[perm], atol=1e-12)


def test_operational_forward_input_validation():
    rng = np.random.default_rng(15)
    p = random_op_params(rng, 1, 2, 1)
    with pytest.raises(NumericsError):
        operational_forward(rng.standard_normal((3, 4, 4)), p)  # wrong C_in
    with pytest.raises(NumericsError):
        operational_forward(rng.standard_normal((4, 4)), p)     # not 3-D


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_operational_preactivation_linear_in_weights(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 5, 5))
    p1 = random_op_params(rng, 1, 1, 2, activation="none")
    p2 = OperationalLayerParams(W=rng.standard_normal(p1.W.shape),
                                b=np.zeros_like(p1.b),
                                shifts=p1.shifts.copy(), activation="none")
    p1.b[:] = 0.0
    psum = OperationalLayerParams(W=p1.W + p2.W, b=p1.b, shifts=p1.shifts,
                                  activation="none")
    lhs = operational_forward(x, psum)
    rhs = operational_forward(x, p1) + operational_forward(x, p2)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_params_shape_validation():
    with pytest.raises(NumericsError):
        OperationalLayerParams(W=np.zeros((1, 1, 1, 2, 2)),
                               b=np.zeros((1, 1)), shifts=np.zeros((1, 2)))
    with pytest.raises(NumericsError):
        OperationalLayerParams(W=np.zeros((1, 1, 1, 3, 3)),
                               b=np.zeros((2, 1)), shifts=np.zeros((1, 2)))
    with pytest.raises(NumericsError):
        OperationalLayerParams(W=np.zeros((1, 1, 1, 3, 3)),
                               b=np.zeros((1, 1)), shifts=np.zeros((1, 3)))
    with pytest.raises(NumericsError):
        OperationalLayerParams(W=np.zeros((1, 1, 1, 3, 3)),
                               b=np.zeros((1, 1)), shifts=np.zeros((1, 2)),
                               activation="relu")


# ---------------------------------------------------------------------------
# transposed layer and pooling


def test_upsample2_zero_structure():
    x = np.arange(12, dtype=float).reshape(1, 3, 4)
    up = upsample2_zero(x)
    assert up.shape == (1, 6, 8)
    assert np.array_equal(up[:, ::2, ::2], x)
    up[:, ::2, ::2] = 0.0
    assert not up.any()


def test_transposed_equals_upsample_then_operational():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 4, 5))
    p = random_op_params(rng, 3, 2, 2)
    got = transposed_operational_forward(x, p)
    want = operational_forward(upsample2_zero(x), p)
    assert got.shape == (3, 8, 10)
    assert np.array_equal(got, want)
    with pytest.raises(NumericsError):
        transposed_operational_forward(x, p, stride=3)


def test_maxpool2_hand_example_and_tie_break():
    x = np.array([[[1.0, 2.0, 5.0, 5.0],
                   [4.0, 3.0, 5.0, 0.0],
                   [7.0, 7.0, -1.0, -2.0],
                   [7.0, 7.0, -3.0, -4.0]]])
    pooled, idx = maxpool2(x)
    assert np.array_equal(pooled, [[[4.0, 5.0], [7.0, -1.0]]])
    # ties: flat row-major position of the first maximum in each block
    assert np.array_equal(idx, [[[2, 0], [0, 0]]])
    with pytest.raises(NumericsError):
        maxpool2(np.zeros((1, 3, 4)))


def test_maxpool2_matches_block_loop():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((3, 6, 8))
    pooled, idx = maxpool2(x)
    for c in range(3):
        for i in range(3):
            for j in range(4):
                block = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                assert pooled[c, i, j] == block.max()


def test_maxpool2_backward_routes_to_argmax():
    rng = np.random.default_rng(18)
    x = rng.standard_normal((2, 4, 6))
    pooled, idx = maxpool2(x)
    g = rng.standard_normal(pooled.shape)
    dx = maxpool2_backward(g, idx, x.shape)
    assert dx.shape == x.shape
    for c in range(2):
        for i in range(2):
            for j in range(3):
                block = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                dblock = dx[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                flat = np.zeros(4)
                flat[np.argmax(block.reshape(-1))] = g[c, i, j]
                assert np.array_equal(dblock.reshape(-1), flat)


# ---------------------------------------------------------------------------
# dense polynomial layer


def test_selfgop_forward_matches_loop_oracle():
    rng = np.random.default_rng(19)
    p = SelfGOPParams(W=rng.standard_normal((3, 7, 4)) * 0.3,
                      b=rng.standard_normal((3, 7)) * 0.1,
                      activation="tanh")
    y = rng.standard_normal(4)
    assert np.allclose(selfgop_forward(y, p), selfgop_composed(y, p),
                       atol=1e-12)


def test_selfgop_linear_case_is_matrix_multiply():
    rng = np.random.default_rng(20)
    W = rng.standard_normal((1, 6, 3))
    p = SelfGOPParams(W=W, b=np.zeros((1, 6)), activation="none")
    y = rng.standard_normal(3)
    assert np.allclose(selfgop_forward(y, p), W[0] @ y, atol=1e-14)


def test_selfgop_validation():
    with pytest.raises(NumericsError):
        SelfGOPParams(W=np.zeros((1, 3, 3)), b=np.zeros((1, 3)))  # n must > m
    p = SelfGOPParams(W=np.zeros((1, 5, 3)), b=np.zeros((1, 5)))
    with pytest.raises(NumericsError):
        selfgop_forward(np.zeros(4), p)


# ---------------------------------------------------------------------------
# activations and the classification head


def test_activations_and_grads():
    z = np.linspace(-2, 2, 9)
    assert np.allclose(apply_activation(z, "tanh"), np.tanh(z))
    assert np.allclose(apply_activation(z, "sigmoid"), 1 / (1 + np.exp(-z)))
    assert np.array_equal(apply_activation(z, "none"), z)
    h = 1e-6
    for tag in ("tanh", "sigmoid", "none"):
        y = apply_activation(z, tag)
        fd = (apply_activation(z + h, tag) - apply_activation(z - h, tag)) / (2 * h)
        assert np.allclose(activation_grad(y, tag), fd, atol=1e-8)
    with pytest.raises(NumericsError):
        apply_activation(z, "relu")


def test_grouped_avgpool_softmax_hand_value():
    v = np.array([[0.0, 0.0, 4.0, 4.0],
                  [0.0, 0.0, 4.0, 4.0]])
    c = grouped_avgpool_softmax(v, (2, 2))
    want = np.exp([0.0, 4.0])
    want = want / want.sum()
    assert np.allclose(c, want, atol=1e-12)
    assert np.isclose(c.sum(), 1.0)


def test_grouped_avgpool_softmax_shift_invariance():
    rng = np.random.default_rng(21)
    v = rng.standard_normal((6, 8))
    a = grouped_avgpool_softmax(v, (2, 4))
    b = grouped_avgpool_softmax(v + 123.4, (2, 4))
    assert a.shape == (6,)
    assert np.allclose(a, b, atol=1e-12)


def test_grouped_avgpool_softmax_tiling_errors():
    v = np.zeros((6, 8))
    with pytest.raises(NumericsError):
        grouped_avgpool_softmax(v, (4, 4))
    with pytest.raises(NumericsError):
        grouped_avgpool_softmax(np.zeros(8), (2, 2))


# ---------------------------------------------------------------------------
# pinned degenerate cases


def test_operational_forward_scalar_taylor_sum():
    # 1x1 input and 1x1 kernels reduce the layer to a plain polynomial:
    # 1*0.5 + 2*0.5^2 = 1.0
    p = OperationalLayerParams(
        W=np.array([1.0, 2.0]).reshape(1, 1, 2, 1, 1),
        b=np.zeros((1, 2)),
        shifts=np.zeros((1, 2)),
        activation="none")
    out = operational_forward(np.full((1, 1, 1), 0.5), p)
    assert out.shape == (1, 1, 1)
    assert abs(out[0, 0, 0] - 1.0) < 1e-15


def test_transposed_identity_kernel_is_zero_interleave():
    rng = np.random.default_rng(40)
    x = rng.standard_normal((1, 3, 4))
    ident = np.zeros((1, 1, 1, 3, 3))
    ident[..., 1, 1] = 1.0
    p = OperationalLayerParams(W=ident, b=np.zeros((1, 1)),
                               shifts=np.zeros((1, 2)), activation="none")
    got = transposed_operational_forward(x, p)
    assert np.array_equal(got, upsample2_zero(x))


def test_transposed_zero_input_gives_bias_offset():
    p = OperationalLayerParams(
        W=np.ones((1, 1, 1, 3, 3)), b=np.full((1, 1), 0.3),
        shifts=np.zeros((1, 2)), activation="none")
    got = transposed_operational_forward(np.zeros((1, 2, 2)), p)
    assert got.shape == (1, 4, 4)
    assert np.allclose(got, 0.3, atol=1e-15)


def test_maxpool2_constant_image_first_index_tie():
    x = np.full((1, 4, 4), 7.25)
    pooled, idx = maxpool2(x)
    assert np.array_equal(pooled, np.full((1, 2, 2), 7.25))
    assert not idx.any()  # row-major first occurrence within each block


def test_selfgop_zero_input_is_activation_of_bias():
    rng = np.random.default_rng(41)
    W = rng.standard_normal((2, 4, 3))
    z = selfgop_forward(np.zeros(3), SelfGOPParams(
        W=W, b=np.zeros((2, 4)), activation="tanh"))
    assert np.array_equal(z, np.zeros(4))
    z = selfgop_forward(np.zeros(3), SelfGOPParams(
        W=W, b=np.zeros((2, 4)), activation="sigmoid"))
    assert np.allclose(z, 0.5, atol=1e-15)


def test_grouped_avgpool_softmax_class_map_geometry():
    # a 16x76 map pooled over 8x4 blocks yields a 38-way distribution
    rng = np.random.default_rng(42)
    probs = grouped_avgpool_softmax(rng.standard_normal((16, 76)), (8, 4))
    assert probs.shape == (38,)
    assert abs(probs.sum() - 1.0) < 1e-12

    # saturation: one hot block dominates
    v = np.full((16, 76), -40.0)
    v[8:16, 4:8] = 40.0  # class index 1*19 + 1 = 20
    probs = grouped_avgpool_softmax(v, (8, 4))
    assert probs.argmax() == 20
    assert probs[20] > 1.0 - 1e-12

    # symmetry: a uniform map cannot prefer any class
    probs = grouped_avgpool_softmax(np.full((16, 76), 3.3), (8, 4))
    assert np.allclose(probs, 1.0 / 38.0, atol=1e-15)
