import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from headpose import tensor as T
from headpose.gradcheck import numerical_gradient, relative_error
from headpose.posenet import Layer, NetworkParams


def naive_conv(x, w, b):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    out = np.zeros((c_out, h - k + 1, wd - k + 1))
    for o in range(c_out):
        for y in range(h - k + 1):
            for xx in range(wd - k + 1):
                acc = b[o]
                for c in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            acc += x[c, y + i, xx + j] * w[o, c, i, j]
                out[o, y, xx] = acc
    return out


def naive_pool(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(x[ch, 2 * i, 2 * j], x[ch, 2 * i, 2 * j + 1],
                                    x[ch, 2 * i + 1, 2 * j], x[ch, 2 * i + 1, 2 * j + 1])
    return out


def fd_check(f, arr, analytic, rng, n=200, step=1e-5):
    idx = np.sort(rng.choice(arr.size, size=min(n, arr.size), replace=False))
    num = numerical_gradient(f, arr, idx, step)
    return relative_error(analytic.reshape(-1)[idx], num).max()


# ---------------------------------------------------------------- conv

def test_conv_ones():
    out = T.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1))
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 4.0))


def test_conv_identity_mixing():
    x = np.random.default_rng(0).standard_normal((4, 6, 5))
    w = np.eye(4).reshape(4, 4, 1, 1)
    np.testing.assert_array_equal(T.conv2d_forward(x, w, np.zeros(4)), x)


def test_conv_matches_naive():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(T.conv2d_forward(x, w, b), naive_conv(x, w, b), rtol=0, atol=1e-12)


def test_conv_batch_equals_per_sample():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 2, 7, 6)), rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)
    batched = T.conv2d_forward(x, w, b)
    for n in range(3):
        np.testing.assert_allclose(batched[n], T.conv2d_forward(x[n], w, b), atol=1e-13)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 5, 5\).*\(3, 1, 3, 3\)"):
        T.conv2d_forward(np.zeros((2, 5, 5)), np.zeros((3, 1, 3, 3)), np.zeros(3))
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(T.ShapeError):
        T.conv2d_backward(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros((1, 3, 3)))


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(3)
    g = T.conv2d_backward(rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), np.zeros((3, 3, 3)))
    assert not g.d_weights.any() and not g.d_bias.any() and not g.d_input.any()


def test_conv_backward_counts_window_coverage():
    g = T.conv2d_backward(np.ones((1, 3, 3)), np.ones((1, 1, 2, 2)), np.ones((1, 2, 2)))
    # each filter tap sees all four output windows of a 3x3 input
    np.testing.assert_array_equal(g.d_weights, np.full((1, 1, 2, 2), 4.0))
    np.testing.assert_array_equal(g.d_bias, [4.0])
    np.testing.assert_array_equal(g.d_input[0], [[1, 2, 1], [2, 4, 2], [1, 2, 1]])


def _conv_fd(c_in, h, c_out, k, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((c_in, h, h)), rng.standard_normal((c_out, c_in, k, k)) * 0.2, rng.standard_normal(c_out)

    def f():
        o = T.conv2d_forward(x, w, b)
        return float(np.sum(o * o))

    out = T.conv2d_forward(x, w, b)
    g = T.conv2d_backward(x, w, 2 * out)
    return max(fd_check(f, w, g.d_weights, rng), fd_check(f, b, g.d_bias, rng), fd_check(f, x, g.d_input, rng))


def test_conv_backward_finite_differences():
    assert _conv_fd(2, 6, 3, 3, seed=4) < 1e-4


# ---------------------------------------------------------------- pooling

def test_pool_single_window():
    out, idx = T.maxpool2_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out.item() == 4.0 and idx.item() == 3


def test_pool_tie_breaks_first():
    out, idx = T.maxpool2_forward(np.full((2, 4, 4), 7.0))
    np.testing.assert_array_equal(out, 7.0)
    np.testing.assert_array_equal(idx, 0)


def test_pool_matches_naive():
    x = np.random.default_rng(5).standard_normal((30, 60, 60))
    np.testing.assert_array_equal(T.maxpool2_forward(x)[0], naive_pool(x))


def test_pool_odd_rejected():
    with pytest.raises(T.ShapeError):
        T.maxpool2_forward(np.zeros((1, 3, 4)))


def test_pool_backward_routes_to_winner():
    x = np.random.default_rng(6).permutation(64).astype(float).reshape(1, 8, 8)
    _, idx = T.maxpool2_forward(x)
    d = T.maxpool2_backward(idx, np.ones((1, 4, 4)))
    blocks = d.reshape(4, 2, 4, 2).sum(axis=(1, 3))
    np.testing.assert_array_equal(blocks, 1.0)
    assert set(np.unique(d)) == {0.0, 1.0}
    assert not T.maxpool2_backward(idx, np.zeros((1, 4, 4))).any()


def test_pool_backward_bad_index():
    with pytest.raises(ValueError):
        T.maxpool2_backward(np.full((1, 2, 2), 4), np.ones((1, 2, 2)))


def test_pool_backward_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 8, 8))

    def f():
        o, _ = T.maxpool2_forward(x)
        return float(np.sum(o * o))

    out, idx = T.maxpool2_forward(x)
    assert fd_check(f, x, T.maxpool2_backward(idx, 2 * out), rng) < 1e-4


@given(hnp.arrays(np.float64, (2, 6, 4), elements=st.floats(-1e3, 1e3)),
       hnp.arrays(np.float64, (2, 3, 2), elements=st.floats(-1e3, 1e3)))
def test_pool_backward_conserves_mass(x, g):
    _, idx = T.maxpool2_forward(x)
    assert math.isclose(T.maxpool2_backward(idx, g).sum(), g.sum(), rel_tol=1e-12, abs_tol=1e-9)


# ---------------------------------------------------------------- tanh

def test_tanh_values():
    assert T.tanh_forward(np.array(0.0)) == 0.0
    ref = float(mpmath.tanh(mpmath.mpf(1)))
    assert abs(T.tanh_forward(np.array(1.0)) - ref) < 1e-12


@given(hnp.arrays(np.float64, 10, elements=st.floats(-20, 20)))
def test_tanh_odd_and_bounded(x):
    y = T.tanh_forward(x)
    np.testing.assert_array_equal(T.tanh_forward(-x), -y)
    assert np.all(np.abs(y) <= 1.0)
    small = np.abs(x) < 5  # float64 rounds tanh to exactly +-1 beyond ~19
    assert np.all(np.abs(y[small]) < 1.0)


def test_tanh_backward_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.standard_normal(50)

    def f():
        return float(np.sum(np.tanh(x) ** 2))

    y = T.tanh_forward(x)
    assert fd_check(f, x, T.tanh_backward(y, 2 * y), rng) < 1e-4


# ---------------------------------------------------------------- dense

def test_dense_identity_and_bias():
    x = np.arange(4.0)
    np.testing.assert_array_equal(T.dense_forward(x, np.eye(4), np.zeros(4)), x)
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(T.dense_forward(np.zeros(5), np.ones((3, 5)), b), b)


def test_dense_shape_error():
    with pytest.raises(T.ShapeError):
        T.dense_forward(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


def _dense_fd(n_in, n_out, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal(n_in), rng.standard_normal((n_out, n_in)) * 0.3, rng.standard_normal(n_out)

    def f():
        o = T.dense_forward(x, w, b)
        return float(np.sum(o * o))

    out = T.dense_forward(x, w, b)
    g = T.dense_backward(x, w, 2 * out)
    return max(fd_check(f, w, g.d_weights, rng), fd_check(f, b, g.d_bias, rng), fd_check(f, x, g.d_input, rng))


def test_dense_backward_finite_differences():
    assert _dense_fd(10, 4, seed=9) < 1e-4


# ---------------------------------------------------------------- sgd

def _params(w, b):
    return NetworkParams([Layer("l", np.array(w, dtype=float), np.array(b, dtype=float))])


def test_sgd_vanilla():
    p = _params([1.0, 2.0], [0.5])
    T.sgd_step(p, [(np.array([0.1, -0.2]), np.array([1.0]))], T.SgdConfig(0.5, 0.0, 0.0))
    np.testing.assert_allclose(p.layers[0].weights, [0.95, 2.1])
    np.testing.assert_allclose(p.layers[0].bias, [0.0])


def test_sgd_fixed_point():
    p = _params([1.0, -3.0], [2.0])
    T.sgd_step(p, [(np.zeros(2), np.zeros(1))], T.SgdConfig(0.1, 0.9, 0.0))
    np.testing.assert_array_equal(p.layers[0].weights, [1.0, -3.0])


def test_sgd_two_step_recurrence():
    # by hand, w0 = 1, g = 0.5, lr = 0.1, mu = 0.9, decay = 5e-4:
    # v1 = -0.1 * (0.5 + 5e-4 * 1)            = -0.05005          w1 = 0.94995
    # v2 = 0.9 * v1 - 0.1 * (0.5 + 5e-4 * w1) = -0.0950924975      w2 = 0.8548575025
    p = _params([1.0], [0.0])
    cfg = T.SgdConfig(0.1, 0.9, 5e-4)
    g = [(np.array([0.5]), np.array([0.0]))]
    T.sgd_step(p, g, cfg)
    assert p.layers[0].weights[0] == pytest.approx(0.94995, abs=1e-15)
    T.sgd_step(p, g, cfg)
    assert p.layers[0].weights[0] == pytest.approx(0.8548575025, abs=1e-15)
    assert p.layers[0].momentum_w[0] == pytest.approx(-0.0950924975, abs=1e-15)


@given(hnp.arrays(np.float64, 5, elements=st.floats(-10, 10)), hnp.arrays(np.float64, 5, elements=st.floats(-10, 10)))
@settings(max_examples=30)
def test_sgd_zero_lr_is_identity(w, g):
    p = _params(w, [0.0])
    T.sgd_step(p, [(g, np.ones(1))], T.SgdConfig(0.0, 0.9, 5e-4))
    np.testing.assert_array_equal(p.layers[0].weights, w)


def test_sgd_rejects_non_finite_naming_layer():
    p = _params([1.0], [0.0])
    with pytest.raises(FloatingPointError, match="layer l"):
        T.sgd_step(p, [(np.array([np.nan]), np.zeros(1))], T.SgdConfig())


def test_sgd_config_defaults():
    cfg = T.SgdConfig()
    assert (cfg.momentum, cfg.weight_decay) == (0.9, 5e-4)
