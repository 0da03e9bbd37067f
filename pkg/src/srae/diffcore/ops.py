"""Operator kernels: forward evaluation and vector-Jacobian products.

All image tensors use NHWC layout with a leading batch axis. Kernels are
dtype-generic: float32 in normal use, float64 when the gradient checker
re-runs a graph for its finite-difference oracle.

Every kernel is registered as ``OPS[name] = OpKernel(forward, backward)``:

* ``forward(inputs, attrs) -> (out, cache)``
* ``backward(grad, inputs, out, cache, attrs, need) -> list[grad | None]``

``need[i]`` is False when the caller does not want the gradient of input
``i``; kernels may then skip that work and return None in its slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class OpKernel:
    forward: Callable
    backward: Callable


OPS: dict[str, OpKernel] = {}


def register(name):
    def wrap(cls):
        OPS[name] = OpKernel(cls.forward, cls.backward)
        return cls

    return wrap


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------- conv


def _im2col(x, kh, kw, stride, pad):
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # (n, ho, wo, c, kh, kw) -> rows ordered (kh, kw, c) to match weight layout
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


@register("conv2d")
class Conv2d:
    """x (N,H,W,C) * w (KH,KW,C,O) + b (O,), zero padding."""

    @staticmethod
    def forward(ins, attrs):
        x, w, b = ins
        if x.ndim != 4 or w.ndim != 4:
            raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
        kh, kw, c, o = w.shape
        if x.shape[3] != c:
            raise ValueError(f"conv2d input has {x.shape[3]} channels, kernel expects {c}")
        if b.shape != (o,):
            raise ValueError(f"conv2d bias shape {b.shape} != ({o},)")
        stride, pad = attrs["stride"], attrs["pad"]
        if x.shape[1] + 2 * pad < kh or x.shape[2] + 2 * pad < kw:
            raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape[1:3]}")
        cols, ho, wo = _im2col(x, kh, kw, stride, pad)
        out = cols @ w.reshape(kh * kw * c, o) + b
        return out.reshape(x.shape[0], ho, wo, o), cols

    @staticmethod
    def backward(g, ins, out, cols, attrs, need):
        x, w, _ = ins
        kh, kw, c, o = w.shape
        stride, pad = attrs["stride"], attrs["pad"]
        n, ho, wo, _ = g.shape
        g2 = g.reshape(-1, o)
        dw = (cols.T @ g2).reshape(w.shape) if need[1] else None
        db = g2.sum(axis=0, dtype=np.float64).astype(g.dtype) if need[2] else None
        dx = None
        if need[0] and stride == 1 and pad <= kh - 1 and pad <= kw - 1 and kh == kw:
            # full correlation of g with the flipped kernel, channels swapped
            wt = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(-1, c)
            gcols, _, _ = _im2col(g, kh, kw, 1, kh - 1 - pad)
            dx = (gcols @ wt).reshape(x.shape)
        elif need[0]:
            dcols = (g2 @ w.reshape(-1, o).T).reshape(n, ho, wo, kh, kw, c)
            hp, wp = x.shape[1] + 2 * pad, x.shape[2] + 2 * pad
            dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
            dx = dxp[:, pad : pad + x.shape[1], pad : pad + x.shape[2]]
        return [dx, dw, db]


@register("upsample2x")
class Upsample2x:
    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        if x.ndim != 4:
            raise ValueError(f"upsample2x expects NHWC input, got {x.shape}")
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        n, h, w, c = ins[0].shape
        return [g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))]


@register("dense")
class Dense:
    @staticmethod
    def forward(ins, attrs):
        x, w, b = ins
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ValueError(f"dense shapes incompatible: x {x.shape}, w {w.shape}")
        if b.shape != (w.shape[1],):
            raise ValueError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
        return x @ w + b, None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        x, w, _ = ins
        return [
            g @ w.T if need[0] else None,
            x.T @ g if need[1] else None,
            g.sum(axis=0, dtype=np.float64).astype(g.dtype) if need[2] else None,
        ]


# --------------------------------------------------------------- elementwise


@register("leaky_relu")
class LeakyRelu:
    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        return np.where(x > 0, x, x * x.dtype.type(LEAKY_SLOPE)), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        return [np.where(ins[0] > 0, g, g * g.dtype.type(LEAKY_SLOPE))]


@register("sigmoid")
class Sigmoid:
    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        half = x.dtype.type(0.5)
        return half * (np.tanh(half * x) + 1), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        return [g * out * (1 - out)]


@register("tanh")
class Tanh:
    @staticmethod
    def forward(ins, attrs):
        return np.tanh(ins[0]), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        return [g * (1 - out * out)]


@register("exp")
class Exp:
    @staticmethod
    def forward(ins, attrs):
        with np.errstate(over="ignore"):
            return np.exp(ins[0]), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        return [g * out]


@register("log")
class Log:
    """Natural log; with ``floor > 0`` evaluates log(max(x, floor))."""

    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        floor = attrs["floor"]
        xc = np.maximum(x, x.dtype.type(floor)) if floor > 0 else x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(xc), xc

    @staticmethod
    def backward(g, ins, out, xc, attrs, need):
        x = ins[0]
        grad = g / xc
        if attrs["floor"] > 0:
            grad = np.where(x >= x.dtype.type(attrs["floor"]), grad, 0).astype(g.dtype)
        return [grad]


@register("softmax")
class Softmax:
    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True), None

    @staticmethod
    def backward(g, ins, s, cache, attrs, need):
        return [s * (g - (g * s).sum(axis=-1, keepdims=True))]


@register("add")
class Add:
    @staticmethod
    def forward(ins, attrs):
        a, b = ins
        _check_broadcast(a, b)
        return a + b, None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        a, b = ins
        return [_unbroadcast(g, a.shape) if need[0] else None, _unbroadcast(g, b.shape) if need[1] else None]


@register("sub")
class Sub:
    @staticmethod
    def forward(ins, attrs):
        a, b = ins
        _check_broadcast(a, b)
        return a - b, None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        a, b = ins
        return [_unbroadcast(g, a.shape) if need[0] else None, _unbroadcast(-g, b.shape) if need[1] else None]


@register("mul")
class Mul:
    @staticmethod
    def forward(ins, attrs):
        a, b = ins
        _check_broadcast(a, b)
        return a * b, None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        a, b = ins
        return [
            _unbroadcast(g * b, a.shape) if need[0] else None,
            _unbroadcast(g * a, b.shape) if need[1] else None,
        ]


@register("scale")
class Scale:
    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        return x * x.dtype.type(attrs["factor"]), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        return [g * g.dtype.type(attrs["factor"])]


# ------------------------------------------------------------------- shaping


@register("tile")
class Tile:
    """Broadcast an (N,1,1,C) tensor over an a x b spatial grid."""

    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        if x.ndim != 4 or x.shape[1:3] != (1, 1):
            raise ValueError(f"tile expects (N,1,1,C), got {x.shape}")
        n, _, _, c = x.shape
        return np.ascontiguousarray(np.broadcast_to(x, (n, attrs["a"], attrs["b"], c))), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        return [g.sum(axis=(1, 2), keepdims=True, dtype=np.float64).astype(g.dtype)]


@register("global_avg_pool")
class GlobalAvgPool:
    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        if x.ndim != 4:
            raise ValueError(f"global_avg_pool expects NHWC, got {x.shape}")
        return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        n, h, w, c = ins[0].shape
        scaled = g / g.dtype.type(h * w)
        return [np.ascontiguousarray(np.broadcast_to(scaled[:, None, None, :], (n, h, w, c)))]


@register("concat")
class Concat:
    """Concatenate along the channel (last) axis."""

    @staticmethod
    def forward(ins, attrs):
        lead = ins[0].shape[:-1]
        for t in ins[1:]:
            if t.shape[:-1] != lead:
                raise ValueError(f"concat leading shapes differ: {[t.shape for t in ins]}")
        return np.concatenate(ins, axis=-1), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        grads, start = [], 0
        for t, want in zip(ins, need):
            stop = start + t.shape[-1]
            grads.append(np.ascontiguousarray(g[..., start:stop]) if want else None)
            start = stop
        return grads


@register("reshape")
class Reshape:
    """Reshape the per-example part; the batch axis is preserved."""

    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        shape = tuple(attrs["shape"])
        if int(np.prod(x.shape[1:])) != int(np.prod(shape)):
            raise ValueError(f"cannot reshape per-example shape {x.shape[1:]} to {shape}")
        return x.reshape((x.shape[0],) + shape), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        return [g.reshape(ins[0].shape)]


# ---------------------------------------------------------------- reductions


@register("sum")
class Sum:
    """Sum over ``axis`` (None for all axes); accumulates in float64."""

    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        return np.asarray(x.sum(axis=attrs["axis"], dtype=np.float64), dtype=x.dtype), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        x = ins[0]
        axis = attrs["axis"]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.ascontiguousarray(np.broadcast_to(g, x.shape))]


@register("mean")
class Mean:
    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        return np.asarray(x.mean(dtype=np.float64), dtype=x.dtype), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        x = ins[0]
        return [np.full(x.shape, g / x.size, dtype=x.dtype)]


@register("sum_sq")
class SumSq:
    """Squared L2 norm of the whole tensor."""

    @staticmethod
    def forward(ins, attrs):
        (x,) = ins
        x64 = x.astype(np.float64)
        return np.asarray(np.dot(x64.ravel(), x64.ravel()), dtype=x.dtype), None

    @staticmethod
    def backward(g, ins, out, cache, attrs, need):
        return [2 * g * ins[0]]
