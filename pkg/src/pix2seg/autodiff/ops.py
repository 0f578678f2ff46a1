"""Differentiable operations on :class:`Tensor`.

Every function computes its forward value with numpy and, when a tape is
active and some input tracks gradients, records a closure that maps the
output gradient to input gradients.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Rng, ShapeError, Tensor, active_tape

NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2

Scalar = Union[int, float]


def _result(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.track_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        tape.record(op, inputs, result, backward)
    return result


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full((), x, dtype=like.dtype), False)


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.dims != b.dims and b.size != 1:
        raise ShapeError(f"{op}: dims {a.dims} and {b.dims} differ")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.dims:
        return g
    return np.asarray(g.sum()).reshape(t.dims).astype(t.dtype, copy=False)


# elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    b = _as_tensor(b, a)
    _check_binary("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b)))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    b = _as_tensor(b, a)
    _check_binary("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, _reduce_to(-g, b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b)))


def scalar_mul(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return _result("scalar_mul", (a.data * c).astype(a.dtype, copy=False), (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the math name
    s = np.sign(a.data)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return _result("log", np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)) evaluated without overflow."""
    ad = a.data
    out = np.maximum(ad, 0) + np.log1p(np.exp(-np.abs(ad)))
    return _result("softplus", out, (a,), lambda g: (g * _sigmoid(ad),))


# activations ---------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    slope = np.where(a.data > 0, 1.0, alpha).astype(a.dtype)
    return _result("leaky_relu", a.data * slope, (a,), lambda g: (g * slope,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def activation(kind: str, a: Tensor) -> Tensor:
    fns = {"relu": relu, "leaky_relu": leaky_relu, "tanh": tanh, "sigmoid": sigmoid}
    try:
        return fns[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# reductions and layout -----------------------------------------------------


def reduce_mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)
    return _result("reduce_mean", out, (a,), lambda g: (np.full(a.dims, g / n, dtype=a.dtype),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels needs 4-D tensors")
    if (a.dims[0], a.dims[2], a.dims[3]) != (b.dims[0], b.dims[2], b.dims[3]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.dims} vs {b.dims}")
    ca = a.dims[1]
    return _result("concat_channels", np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    c = a.dims[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}:{stop}] outside 0..{c}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result("slice_channels", a.data[:, start:stop].copy(), (a,), bw)


def stack_batch(parts: list[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the batch axis."""
    sizes = [p.dims[0] for p in parts]
    offsets = np.cumsum([0] + sizes)
    return _result("stack_batch", np.concatenate([p.data for p in parts], axis=0), tuple(parts),
                   lambda g: tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts))))


# convolution ---------------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, ho, wo, kh, kw) strided view of receptive fields."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _scatter_windows(cols: np.ndarray, shape: tuple[int, ...], stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window entries back onto an (N, C, Hp, Wp) grid."""
    out = np.zeros(shape, dtype=cols.dtype)
    _, _, ho, wo, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[..., i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation; kernel dims (out_ch, in_ch, kh, kw)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d needs a 4-D input and a 4-D kernel")
    n, c, h, w = x.dims
    oc, ic, kh, kw = kernel.dims
    if ic != c:
        raise ShapeError(f"conv2d: kernel expects {ic} input channels, input has {c}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    xp = _pad(x.data, padding)
    cols = _windows(xp, kh, kw, stride, ho, wo)
    k = kernel.data
    out = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g_k = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if kernel.track_grad else None
        g_x = None
        if x.track_grad:
            gcols = np.tensordot(g, k, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            g_x = np.ascontiguousarray(_crop(_scatter_windows(gcols, xp.shape, stride), padding))
        if bias is None:
            return (g_x, g_k)
        return (g_x, g_k, g.sum(axis=(0, 2, 3)))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; kernel dims (in_ch, out_ch, kh, kw)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv_transpose2d needs a 4-D input and a 4-D kernel")
    n, c, h, w = x.dims
    ic, oc, kh, kw = kernel.dims
    if ic != c:
        raise ShapeError(f"conv_transpose2d: kernel expects {ic} input channels, input has {c}")
    ho = conv_transpose_output_extent(h, kh, stride, padding)
    wo = conv_transpose_output_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: geometry gives output extent {ho}x{wo}")
    k = kernel.data
    full_shape = (n, oc, (h - 1) * stride + kh, (w - 1) * stride + kw)
    cols = np.tensordot(x.data, k, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _crop(_scatter_windows(cols, full_shape, stride), padding)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gcols = _windows(_pad(g, padding), kh, kw, stride, h, w)
        g_x = None
        if x.track_grad:
            g_x = np.ascontiguousarray(
                np.tensordot(gcols, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        g_k = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 2, 3])) if kernel.track_grad else None
        if bias is None:
            return (g_x, g_k)
        return (g_x, g_k, g.sum(axis=(0, 2, 3)))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result("conv_transpose2d", out, inputs, bw)


# normalization and noise ---------------------------------------------------


class RunningStats:
    """Per-channel running mean/variance for eval-mode normalization."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * mean).astype(np.float32)
        self.var = ((1 - m) * self.var + m * var_unbiased).astype(np.float32)


def channel_norm(x: Tensor, gain: Tensor, shift: Tensor, mode: str = "train",
                 running_stats: Optional[RunningStats] = None, eps: float = NORM_EPS) -> Tensor:
    """Per-channel normalization with learned gain and shift.

    ``train`` normalizes with statistics over batch and spatial axes and
    updates ``running_stats`` when given; ``eval`` uses ``running_stats``.
    """
    if x.data.ndim != 4:
        raise ShapeError("channel_norm needs a 4-D input")
    c = x.dims[1]
    if gain.dims != (c,) or shift.dims != (c,):
        raise ShapeError(f"channel_norm: gain/shift must have dims ({c},)")
    xd = x.data
    axes = (0, 2, 3)
    m = xd.size // c
    if mode == "train":
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        if running_stats is not None:
            unbiased = var.reshape(c) * (m / (m - 1)) if m > 1 else var.reshape(c)
            running_stats.update(mu.reshape(c), unbiased)
    elif mode == "eval":
        if running_stats is None:
            raise ValueError("eval-mode channel_norm needs running_stats")
        mu = running_stats.mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_stats.var.reshape(1, c, 1, 1).astype(xd.dtype)
    else:
        raise ValueError(f"unknown norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    gd = gain.data.reshape(1, c, 1, 1)
    out = (xhat * gd + shift.data.reshape(1, c, 1, 1)).astype(xd.dtype, copy=False)

    def bw(g):
        g_gain = (g * xhat).sum(axis=axes)
        g_shift = g.sum(axis=axes)
        dxhat = g * gd
        if mode == "train":
            g_x = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                 - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            g_x = dxhat * inv_std
        return (g_x.astype(xd.dtype, copy=False), g_gain, g_shift)

    return _result("channel_norm", out, (x, gain, shift), bw)


def dropout(x: Tensor, p: float, rng: Optional[Rng], active: bool = True) -> Tensor:
    """Inverted dropout; identity when inactive or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not active or p == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout needs an rng")
    keep = (rng.uniform(x.dims) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))
