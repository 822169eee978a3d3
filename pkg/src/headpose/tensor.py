"""Layer primitives with hand-written backward passes.

Tensors are plain numpy arrays. Every layer function accepts either a single
sample (``C, H, W`` / ``n``) or a leading batch axis; outputs keep whatever
form the input had.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


@dataclass
class LayerGrads:
    d_weights: np.ndarray | None
    d_bias: np.ndarray | None
    d_input: np.ndarray | None


@dataclass
class SgdConfig:
    learning_rate: float = 0.1
    # The published values read "5^-4" and "9^-1"; taken as 5e-4 and 0.9.
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected a {ndim}-d sample or {ndim + 1}-d batch, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution (valid, stride 1)
# --------------------------------------------------------------------------

def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (C*k*k, N*Ho*Wo) matrix; column m is the receptive field of output m."""
    n, c, h, w = x.shape
    windows = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    return windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * (h - k + 1) * (w - k + 1))


def col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add receptive fields back into (N, C, H, W)."""
    n, c, h, w = shape
    ho, wo = h - k + 1, w - k + 1
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, h, w), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _check_conv(xb, weights, bias, x_shape):
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"weights must be (C_out, C_in, k, k), got {weights.shape}")
    c_out, c_in, k, _ = weights.shape
    if xb.shape[1] != c_in:
        raise ShapeError(f"input shape {x_shape} does not match weights shape {weights.shape}")
    if k > xb.shape[2] or k > xb.shape[3]:
        raise ShapeError(f"kernel {k}x{k} larger than input shape {x_shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match weights shape {weights.shape}")


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, return_cols: bool = False):
    """Valid, stride-1 cross-correlation.

    out[o, y, x] = bias[o] + sum_{c,i,j} x[c, y+i, x+j] * weights[o, c, i, j]

    Computed as one matrix product against the im2col lowering of the input.
    With ``return_cols`` the lowered matrix is returned too, so a later
    :func:`conv2d_backward` can skip rebuilding it.
    """
    xb, single = _batched(x, 3)
    _check_conv(xb, weights, bias, x.shape)
    c_out, _, k, _ = weights.shape
    n, _, h, w = xb.shape
    cols = im2col(xb, k)
    out = weights.reshape(c_out, -1) @ cols + bias[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, h - k + 1, w - k + 1).transpose(1, 0, 2, 3))
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(
    x: np.ndarray, weights: np.ndarray, upstream: np.ndarray,
    need_input_grad: bool = True, cols: np.ndarray | None = None,
) -> LayerGrads:
    xb, single = _batched(x, 3)
    gb, _ = _batched(upstream, 3)
    _check_conv(xb, weights, None, x.shape)
    c_out, _, k, _ = weights.shape
    expected = (xb.shape[0], c_out, xb.shape[2] - k + 1, xb.shape[3] - k + 1)
    if gb.shape != expected:
        raise ShapeError(f"upstream grad shape {upstream.shape} does not match conv output shape {expected}")
    if cols is None:
        cols = im2col(xb, k)

    g_t = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(c_out, -1)  # O, N*Ho*Wo
    d_w = (g_t @ cols.T).reshape(weights.shape)
    d_b = g_t.sum(axis=1)
    d_x = None
    if need_input_grad:
        d_x = col2im(weights.reshape(c_out, -1).T @ g_t, xb.shape, k)
        if single:
            d_x = d_x[0]
    return LayerGrads(d_weights=d_w, d_bias=d_b, d_input=d_x)


# --------------------------------------------------------------------------
# 2x2 max pooling
# --------------------------------------------------------------------------

def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling.

    Returns the pooled tensor and, per window, the scan-order index (0..3) of
    the winner. Ties go to the first element in row-major order.
    """
    xb, single = _batched(x, 3)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial extents, got {x.shape}")
    a, b = xb[:, :, 0::2, 0::2], xb[:, :, 0::2, 1::2]
    c_, d = xb[:, :, 1::2, 0::2], xb[:, :, 1::2, 1::2]
    out = np.maximum(np.maximum(a, b), np.maximum(c_, d))
    # scan order 0..3; checking from the last candidate down leaves the first winner
    idx = np.full(out.shape, 3, dtype=np.int8)
    idx[c_ == out] = 2
    idx[b == out] = 1
    idx[a == out] = 0
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2_backward(argmax: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if argmax.shape != upstream.shape:
        raise ShapeError(f"argmax shape {argmax.shape} does not match upstream shape {upstream.shape}")
    if argmax.size and (argmax.min() < 0 or argmax.max() > 3):
        raise ValueError("pooling argmax index out of range [0, 3]")
    ib, single = _batched(argmax, 3)
    gb, _ = _batched(upstream, 3)
    n, c, ho, wo = gb.shape
    d_x = np.zeros((n, c, 2 * ho, 2 * wo), dtype=gb.dtype)
    for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        d_x[:, :, di::2, dj::2] = np.where(ib == k, gb, 0)
    return d_x[0] if single else d_x


# --------------------------------------------------------------------------
# tanh and dense
# --------------------------------------------------------------------------

def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(out: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if out.shape != upstream.shape:
        raise ShapeError(f"tanh output shape {out.shape} does not match upstream shape {upstream.shape}")
    return (1.0 - out * out) * upstream


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    xb, single = _batched(x, 1)
    if weights.ndim != 2 or xb.shape[1] != weights.shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match weights shape {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weights shape {weights.shape}")
    out = xb @ weights.T + bias
    return out[0] if single else out


def dense_backward(
    x: np.ndarray, weights: np.ndarray, upstream: np.ndarray, need_input_grad: bool = True
) -> LayerGrads:
    xb, single = _batched(x, 1)
    gb, _ = _batched(upstream, 1)
    if gb.shape != (xb.shape[0], weights.shape[0]):
        raise ShapeError(
            f"upstream grad shape {upstream.shape} does not match dense output for weights {weights.shape}"
        )
    d_x = None
    if need_input_grad:
        d_x = gb @ weights
        if single:
            d_x = d_x[0]
    return LayerGrads(d_weights=gb.T @ xb, d_bias=gb.sum(axis=0), d_input=d_x)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def sgd_step(params, grads, config: SgdConfig):
    """Momentum SGD with L2 weight decay, applied in place.

    v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v

    ``params`` is a :class:`headpose.posenet.NetworkParams`; ``grads`` a list of
    ``(d_weights, d_bias)`` pairs in the same layer order. Returns ``params``.
    """
    if len(grads) != len(params.layers):
        raise ValueError(f"got {len(grads)} gradient entries for {len(params.layers)} layers")
    for layer, (gw, gb) in zip(params.layers, grads):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ShapeError(f"gradient shapes do not match parameters of layer {layer.name}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise FloatingPointError(f"non-finite gradient in layer {layer.name}")

    lr, mu, decay = config.learning_rate, config.momentum, config.weight_decay
    for layer, (gw, gb) in zip(params.layers, grads):
        for w, v, g in ((layer.weights, layer.momentum_w, gw), (layer.bias, layer.momentum_b, gb)):
            v *= mu
            v -= lr * (g + decay * w)
            w += v
    return params
