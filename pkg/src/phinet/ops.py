"""Differentiable operations on 5-rank (N, C, D, H, W) activations.

All functions take and return :class:`~phinet.tensor.Tensor`. Convolution
follows the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .tensor import Tensor, make_result

Extent = Union[int, Sequence[int]]

PROB_CLAMP = 1e-7


def _triple(v: Extent) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 extents, got {v!r}")
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward, "mul")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, np.zeros((), dtype=x.dtype))

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


# ---------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid convolution geometry: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be positive: {self}")

    def output_extent(self, n: int) -> int:
        out = (n + 2 * self.padding - self.kernel) // self.stride + 1
        if n + 2 * self.padding < self.kernel or out < 1:
            raise ValueError(
                f"input extent {n} too small for kernel {self.kernel} "
                f"(padding {self.padding}, stride {self.stride})"
            )
        return out


def _window_slices(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _im2col(xp: np.ndarray, k: int, s: int, out_ext: tuple) -> np.ndarray:
    n, c = xp.shape[:2]
    do, ho, wo = out_ext
    cols = np.empty((n, c, k, k, k, do, ho, wo), dtype=xp.dtype)
    for a in range(k):
        sa = _window_slices(a, s, do)
        for b in range(k):
            sb = _window_slices(b, s, ho)
            for e in range(k):
                cols[:, :, a, b, e] = xp[:, :, sa, sb, _window_slices(e, s, wo)]
    return cols.reshape(n, c * k ** 3, do * ho * wo)


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, s: int, out_ext: tuple) -> np.ndarray:
    n, c = padded_shape[:2]
    do, ho, wo = out_ext
    cols = cols.reshape(n, c, k, k, k, do, ho, wo)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(k):
        sa = _window_slices(a, s, do)
        for b in range(k):
            sb = _window_slices(b, s, ho)
            for e in range(k):
                xp[:, :, sa, sb, _window_slices(e, s, wo)] += cols[:, :, a, b, e]
    return xp


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """3D cross-correlation with cubic kernels, zero padding and stride."""
    if x.ndim != 5:
        raise ValueError(f"conv3d expects N x C x D x H x W input, got {x.shape}")
    k, s, p = spec.kernel, spec.stride, spec.padding
    expected_w = (spec.out_channels, spec.in_channels, k, k, k)
    if x.shape[1] != spec.in_channels or weight.shape != expected_w:
        raise ValueError(f"shape mismatch: input {x.shape}, weight {weight.shape}, spec {spec}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    n = x.shape[0]
    out_ext = tuple(spec.output_extent(e) for e in x.shape[2:])
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, out_ext)
    w2 = weight.data.reshape(spec.out_channels, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape((n, spec.out_channels) + out_ext)
    padded_shape = xp.shape
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, spec.out_channels, -1)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gxp = _col2im(gcols, padded_shape, k, s, out_ext)
            gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3], p:p + x.shape[4]] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return make_result(out, parents, backward, "conv3d")


# ---------------------------------------------------------------- pooling


def _pool_geometry(x: Tensor, window: Extent, stride: Extent):
    if x.ndim != 5:
        raise ValueError(f"pooling expects a 5-rank input, got {x.shape}")
    win, st = _triple(window), _triple(stride)
    if any(w < 1 for w in win) or any(s < 1 for s in st):
        raise ValueError("window and stride must be positive")
    spatial = x.shape[2:]
    if any(w > n for w, n in zip(win, spatial)):
        raise ValueError(f"window {win} larger than input extent {spatial}")
    out_ext = tuple((n - w) // s + 1 for n, w, s in zip(spatial, win, st))
    return win, st, out_ext


def _pool_windows(data, win, st, out_ext):
    n, c = data.shape[:2]
    stack = np.empty((n, c, win[0] * win[1] * win[2]) + out_ext, dtype=data.dtype)
    idx = 0
    for a in range(win[0]):
        for b in range(win[1]):
            for e in range(win[2]):
                stack[:, :, idx] = data[
                    :, :,
                    _window_slices(a, st[0], out_ext[0]),
                    _window_slices(b, st[1], out_ext[1]),
                    _window_slices(e, st[2], out_ext[2]),
                ]
                idx += 1
    return stack


def _scatter_windows(per_offset, shape, win, st, out_ext, dtype):
    gx = np.zeros(shape, dtype=dtype)
    idx = 0
    for a in range(win[0]):
        for b in range(win[1]):
            for e in range(win[2]):
                gx[
                    :, :,
                    _window_slices(a, st[0], out_ext[0]),
                    _window_slices(b, st[1], out_ext[1]),
                    _window_slices(e, st[2], out_ext[2]),
                ] += per_offset(idx)
                idx += 1
    return gx


def max_pool3d(x: Tensor, window: Extent = 2, stride: Extent | None = None) -> Tensor:
    """Windowed maximum. Gradient goes to the first maximal element of each window."""
    win, st, out_ext = _pool_geometry(x, window, window if stride is None else stride)
    stack = _pool_windows(x.data, win, st, out_ext)
    arg = stack.argmax(axis=2)
    out = np.take_along_axis(stack, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        return (_scatter_windows(lambda i: g * (arg == i), x.shape, win, st, out_ext, x.dtype),)

    return make_result(out, (x,), backward, "max_pool3d")


def avg_pool3d(x: Tensor, window: Extent = 2, stride: Extent | None = None) -> Tensor:
    win, st, out_ext = _pool_geometry(x, window, window if stride is None else stride)
    count = win[0] * win[1] * win[2]
    out = _pool_windows(x.data, win, st, out_ext).mean(axis=2)

    def backward(g):
        share = g / x.dtype.type(count)
        return (_scatter_windows(lambda i: share, x.shape, win, st, out_ext, x.dtype),)

    return make_result(out, (x,), backward, "avg_pool3d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool expects a 5-rank input, got {x.shape}")
    count = x.shape[2] * x.shape[3] * x.shape[4]
    out = x.data.mean(axis=(2, 3, 4))

    def backward(g):
        share = (g / x.dtype.type(count))[:, :, None, None, None]
        return (np.broadcast_to(share, x.shape).copy(),)

    return make_result(out, (x,), backward, "global_avg_pool")


# ---------------------------------------------------------------- structure


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate {t.shape} with {ref}: batch/spatial mismatch")
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return make_result(out, inputs, backward, "concat_channels")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T
        gw = x.data.T @ g
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, parents, backward, "dense")


# ---------------------------------------------------------------- normalization


@dataclass
class BatchNormState:
    """Running moments, updated in place during training-mode calls."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel standardization over batch and spatial positions."""
    if x.ndim != 5:
        raise ValueError(f"batch_norm expects a 5-rank input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must have one entry per channel")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    m = x.size // c
    dt = x.dtype.type
    if training:
        if m < 2:
            raise ValueError("training-mode batch_norm needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        mom = state.momentum
        state.mean[...] = (1 - mom) * state.mean + mom * mean
        state.var[...] = (1 - mom) * state.var + mom * var * (m / (m - 1))
    else:
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
        centered = x.data - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        scale = (gamma.data * inv_std).reshape(bshape)
        if training:
            gx = scale / dt(m) * (
                dt(m) * g - gbeta.reshape(bshape) - xhat * ggamma.reshape(bshape)
            )
        else:
            gx = g * scale
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------- heads and losses


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"softmax expects N x K logits with K >= 2, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax received non-finite logits")
    p = _softmax_rows(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p, (logits,), backward, "softmax")


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label index out of range [0, {k})")
    return y.astype(np.int64)


def categorical_cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -ln p[label] with probabilities clamped to [1e-7, 1 - 1e-7]."""
    n, k = probs.shape
    y = _check_labels(labels, n, k)
    rows = np.arange(n)
    picked = probs.data[rows, y]
    clipped = np.clip(picked, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = np.asarray(-np.log(clipped).mean(), dtype=probs.dtype)

    def backward(g):
        grad = np.zeros_like(probs.data)
        live = (picked > PROB_CLAMP) & (picked < 1 - PROB_CLAMP)
        grad[rows, y] = np.where(live, -1.0 / (n * clipped), 0.0)
        return (grad * g,)

    return make_result(loss, (probs,), backward, "categorical_cross_entropy")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Softmax followed by categorical cross-entropy, with the fused gradient (p - onehot)/N."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"expected N x K logits with K >= 2, got {logits.shape}")
    n, k = logits.shape
    y = _check_labels(labels, n, k)
    p = _softmax_rows(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-np.log(np.clip(p[rows, y], PROB_CLAMP, 1 - PROB_CLAMP)).mean(), dtype=logits.dtype)

    def backward(g):
        grad = p.copy()
        grad[rows, y] -= 1
        return (grad * (g / n),)

    return make_result(loss, (logits,), backward, "softmax_cross_entropy")


def binary_cross_entropy(prob: Tensor, labels) -> Tensor:
    """Mean of -[y ln p + (1 - y) ln(1 - p)] with the same probability clamp."""
    p = prob.data.reshape(-1)
    n = p.size
    y = np.asarray(labels).reshape(-1)
    if y.size != n:
        raise ValueError(f"expected {n} labels, got {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary labels must be 0 or 1")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    y = y.astype(prob.dtype)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = np.asarray(-(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean(), dtype=prob.dtype)

    def backward(g):
        live = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
        grad = np.where(live, (-y / pc + (1 - y) / (1 - pc)) / n, 0.0)
        return ((grad * g).reshape(prob.shape).astype(prob.dtype),)

    return make_result(loss, (prob,), backward, "binary_cross_entropy")
