"""The shallow 5-conv pose regressor: layer plan, init, forward/backward, checkpoints."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from headpose import tensor as T

INPUT_SHAPE = (1, 64, 64)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "dense", "tanh", "pool", "flatten"
    name: str = ""
    out_channels: int = 0
    kernel: int = 0


def conv(name, filters, kernel):
    return LayerSpec("conv", name, filters, kernel)


def dense(name, width):
    return LayerSpec("dense", name, width)


TANH = LayerSpec("tanh")
POOL = LayerSpec("pool")
FLATTEN = LayerSpec("flatten")

# 64 -> 60 -> 30 -> 26 -> 13 -> 10 -> 5 -> 3 -> 1
ARCHITECTURE: tuple[LayerSpec, ...] = (
    conv("conv1", 30, 5), TANH, POOL,
    conv("conv2", 30, 5), TANH, POOL,
    conv("conv3", 30, 4), TANH, POOL,
    conv("conv4", 30, 3), TANH,
    conv("conv5", 120, 3), TANH,
    FLATTEN,
    dense("fc1", 120), TANH,
    dense("fc2", 84), TANH,
    dense("fc3", 3), TANH,
)

OUTPUT_ORDER = ("pitch", "roll", "yaw")


def trace_shapes(plan=ARCHITECTURE, input_shape=INPUT_SHAPE) -> list[tuple[int, ...]]:
    """Activation shape after every layer of ``plan``, starting with the input."""
    shapes = [tuple(input_shape)]
    cur = tuple(input_shape)
    for spec in plan:
        if spec.kind == "conv":
            c, h, w = cur
            if spec.kernel > h or spec.kernel > w:
                raise T.ShapeError(f"{spec.name}: kernel {spec.kernel} does not fit input {cur}")
            cur = (spec.out_channels, h - spec.kernel + 1, w - spec.kernel + 1)
        elif spec.kind == "pool":
            c, h, w = cur
            if h % 2 or w % 2:
                raise T.ShapeError(f"pooling an odd extent {cur}")
            cur = (c, h // 2, w // 2)
        elif spec.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif spec.kind == "dense":
            if len(cur) != 1:
                raise T.ShapeError(f"{spec.name}: dense layer needs a flat input, got {cur}")
            cur = (spec.out_channels,)
        elif spec.kind != "tanh":
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        shapes.append(cur)
    return shapes


def param_shapes(plan=ARCHITECTURE, input_shape=INPUT_SHAPE) -> list[tuple[str, tuple, tuple]]:
    """(name, weight shape, bias shape) for each parametrised layer in order."""
    shapes = trace_shapes(plan, input_shape)
    out = []
    for spec, in_shape in zip(plan, shapes):
        if spec.kind == "conv":
            out.append((spec.name, (spec.out_channels, in_shape[0], spec.kernel, spec.kernel), (spec.out_channels,)))
        elif spec.kind == "dense":
            out.append((spec.name, (spec.out_channels, in_shape[0]), (spec.out_channels,)))
    return out


def fingerprint(plan=ARCHITECTURE, input_shape=INPUT_SHAPE) -> bytes:
    desc = ";".join(f"{n}:{w}:{b}" for n, w, b in param_shapes(plan, input_shape))
    return hashlib.sha256(desc.encode()).digest()


def _audit(plan, input_shape):
    shapes = trace_shapes(plan, input_shape)
    if plan is ARCHITECTURE:
        spatial = [s[1] for s in shapes if len(s) == 3]
        # input, then each conv/pool output (tanh layers repeat the previous extent)
        distinct = [spatial[0]] + [b for a, b in zip(spatial, spatial[1:]) if a != b]
        if distinct != [64, 60, 30, 26, 13, 10, 5, 3, 1] or shapes[-1] != (3,):
            raise AssertionError(f"architecture no longer closes: {shapes}")
    return shapes


@dataclass
class Layer:
    name: str
    weights: np.ndarray
    bias: np.ndarray
    momentum_w: np.ndarray = field(default=None)
    momentum_b: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.momentum_w is None:
            self.momentum_w = np.zeros_like(self.weights)
        if self.momentum_b is None:
            self.momentum_b = np.zeros_like(self.bias)


@dataclass
class NetworkParams:
    layers: list[Layer]
    plan: tuple[LayerSpec, ...] = ARCHITECTURE
    input_shape: tuple[int, ...] = INPUT_SHAPE

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            [Layer(l.name, l.weights.astype(dtype), l.bias.astype(dtype),
                   l.momentum_w.astype(dtype), l.momentum_b.astype(dtype)) for l in self.layers],
            self.plan, self.input_shape,
        )

    def copy(self) -> "NetworkParams":
        return self.astype(self.dtype)


def build_network(seed: int, plan=ARCHITECTURE, input_shape=INPUT_SHAPE, dtype=np.float32) -> NetworkParams:
    """Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), from a seeded generator."""
    _audit(plan, input_shape)
    rng = np.random.default_rng(seed)
    layers = []
    for name, w_shape, b_shape in param_shapes(plan, input_shape):
        fan_in = int(np.prod(w_shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=w_shape).astype(dtype)
        b = rng.uniform(-bound, bound, size=b_shape).astype(dtype)
        layers.append(Layer(name, w, b))
    return NetworkParams(layers, tuple(plan), tuple(input_shape))


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _check_input(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    shape = tuple(params.input_shape)
    if x.shape != shape and x.shape[1:] != shape:
        raise T.ShapeError(f"network expects input {shape} or a batch of them, got {x.shape}")
    return np.asarray(x, dtype=params.dtype)


def forward_training(params: NetworkParams, x: np.ndarray):
    """Forward pass that keeps what backward needs.

    Returns ``(output, cache)``; the cache is a list with one entry per layer
    of the plan.
    """
    x = _check_input(params, x)
    batched = x.shape != tuple(params.input_shape)
    cache = []
    it = iter(params.layers)
    for spec in params.plan:
        if spec.kind == "conv":
            layer = next(it)
            inp = x
            x, cols = T.conv2d_forward(x, layer.weights, layer.bias, return_cols=True)
            cache.append((inp, cols))
        elif spec.kind == "dense":
            layer = next(it)
            cache.append(x)
            x = T.dense_forward(x, layer.weights, layer.bias)
        elif spec.kind == "tanh":
            x = T.tanh_forward(x)
            cache.append(x)
        elif spec.kind == "pool":
            x, idx = T.maxpool2_forward(x)
            cache.append(idx)
        elif spec.kind == "flatten":
            cache.append(x.shape)
            x = x.reshape(x.shape[0], -1) if batched else x.reshape(-1)
    return x, cache


def forward(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Normalised (pitch, roll, yaw) prediction, each component in (-1, 1)."""
    return forward_training(params, x)[0]


def backward(params: NetworkParams, cache: list, d_out: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/d(output).

    Returned as ``(d_weights, d_bias)`` pairs in layer order, summed over the
    batch when the forward pass was batched.
    """
    if len(cache) != len(params.plan):
        raise ValueError(f"cache has {len(cache)} entries, plan has {len(params.plan)} layers")
    grads = []
    g = np.asarray(d_out, dtype=params.dtype)
    layer_iter = reversed(params.layers)
    first_param = next(i for i, s in enumerate(params.plan) if s.kind in ("conv", "dense"))
    for i in range(len(params.plan) - 1, -1, -1):
        spec, saved = params.plan[i], cache[i]
        if spec.kind in ("conv", "dense"):
            layer = next(layer_iter)
            try:
                if spec.kind == "conv":
                    inp, cols = saved
                    lg = T.conv2d_backward(inp, layer.weights, g, need_input_grad=i > first_param, cols=cols)
                else:
                    lg = T.dense_backward(saved, layer.weights, g, need_input_grad=i > first_param)
            except (T.ShapeError, AttributeError, TypeError, ValueError) as exc:
                raise ValueError(f"cache entry for {layer.name} does not match its parameters: {exc}") from exc
            grads.append((lg.d_weights, lg.d_bias))
            g = lg.d_input
        elif spec.kind == "tanh":
            g = T.tanh_backward(saved, g)
        elif spec.kind == "pool":
            g = T.maxpool2_backward(saved, g)
        elif spec.kind == "flatten":
            g = g.reshape(saved)
    grads.reverse()
    return grads


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"HPOSENET"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(params: NetworkParams, path) -> None:
    """Write weights and biases as little-endian float32.

    Layout: magic, u32 version, 32-byte architecture fingerprint, u32 layer
    count, then per layer: u16 name length, name, and for weights then bias
    a u8 ndim, u32 extents, raw data.
    """
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), fingerprint(params.plan, params.input_shape),
             struct.pack("<I", len(params.layers))]
    for layer in params.layers:
        name = layer.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        for arr in (layer.weights, layer.bias):
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_params(path, plan=ARCHITECTURE, input_shape=INPUT_SHAPE) -> NetworkParams:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a pose network checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_fp = r.take(32, "fingerprint")
    (n_layers,) = r.unpack("<I", "layer count")
    expected = param_shapes(plan, input_shape)
    if n_layers != len(expected):
        raise CheckpointError(f"checkpoint has {n_layers} layers, architecture has {len(expected)}")

    layers = []
    for name, w_shape, b_shape in expected:
        (n,) = r.unpack("<H", "layer name length")
        got_name = r.take(n, "layer name").decode(errors="replace")
        if got_name != name:
            raise CheckpointError(f"expected layer {name}, found {got_name}")
        arrays = []
        for shape, what in ((w_shape, "weights"), (b_shape, "bias")):
            (ndim,) = r.unpack("<B", f"{name} {what} rank")
            dims = r.unpack(f"<{ndim}I", f"{name} {what} shape")
            if tuple(dims) != shape:
                raise CheckpointError(f"layer {name} {what} has shape {tuple(dims)}, expected {shape}")
            raw = r.take(4 * int(np.prod(dims)), f"{name} {what} data")
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32))
        layers.append(Layer(name, arrays[0], arrays[1]))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after last layer")
    if stored_fp != fingerprint(plan, input_shape):
        raise CheckpointError("architecture fingerprint mismatch")
    return NetworkParams(layers, tuple(plan), tuple(input_shape))
