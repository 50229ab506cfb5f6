"""Differentiable primitives used by the network.

Arrays are batched ``[N, C, H, W]`` unless stated otherwise. Convolutions are
cross-correlations implemented with strided window views and ``tensordot``.
"""

from __future__ import annotations

import contextlib
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (ContractError, DimensionError, Tensor, as_tensor,
                     make_node)

# ---------------------------------------------------------------------------
# FLOP accounting hook (used by metrics.estimate_flops)

_flop_counters: list = []


@contextlib.contextmanager
def count_flops():
    """Collect per-layer FLOP records for every primitive executed inside."""
    records: list = []
    _flop_counters.append(records)
    try:
        yield records
    finally:
        _flop_counters.remove(records)


def _record(kind: str, flops: int) -> None:
    for records in _flop_counters:
        records.append((kind, int(flops)))


def conv_flops(k: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    return 2 * k * k * c_in * c_out * h_out * w_out


# ---------------------------------------------------------------------------
# elementwise / structural


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), bw, "mul")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select with a constant boolean condition (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        ga = np.where(cond, g, 0.0)
        gb = np.where(cond, 0.0, g)
        return (_unbroadcast(np.broadcast_to(ga, out.shape), sa),
                _unbroadcast(np.broadcast_to(gb, out.shape), sb))

    return make_node(out, (a, b), bw, "where")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    return make_node(np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, shape),), "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.data.shape, x.data.size
    return make_node(np.asarray(x.data.sum() / n), (x,),
                     lambda g: (np.broadcast_to(g / n, shape),), "mean")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)
    _record("relu", out.size)
    return make_node(out, (x,), lambda g: (np.where(pos, g, 0.0),), "relu")


def tanh_act(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    _record("tanh", out.size)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def maxpool2x2(x) -> Tensor:
    """Non-overlapping 2x2 max pooling, stride 2."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even H, W; got H={h}, W={w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    _record("maxpool", x.data.size)

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return make_node(out, (x,), bw, "maxpool2x2")


# ---------------------------------------------------------------------------
# convolution kernels (plain numpy, no graph)


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")


def _windows(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride][:, :, :h_out, :w_out]


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    k = w.shape[-1]
    h_out = _conv_out_size(x.shape[2], k, stride, padding)
    w_out = _conv_out_size(x.shape[3], k, stride, padding)
    cols = _windows(_pad(x, padding), k, stride, h_out, w_out)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_adjoint(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                  h_in: int, w_in: int) -> np.ndarray:
    """Adjoint of ``_conv_fwd`` w.r.t. its input (scatter-add of weighted taps)."""
    n, _, h_out, w_out = g.shape
    k = w.shape[-1]
    taps = np.tensordot(g, w, axes=([1], [0]))  # [N, Ho, Wo, Cin, k, k]
    hp = max(h_in + 2 * padding, (h_out - 1) * stride + k)
    wp = max(w_in + 2 * padding, (w_out - 1) * stride + k)
    acc = np.zeros((n, w.shape[1], hp, wp))
    hs, ws = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            acc[:, :, i:i + hs:stride, j:j + ws:stride] += taps[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return acc[:, :, padding:padding + h_in, padding:padding + w_in]


def _conv_wgrad(x: np.ndarray, g: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    cols = _windows(_pad(x, padding), k, stride, g.shape[2], g.shape[3])
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


# ---------------------------------------------------------------------------
# convolution ops


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``weight`` [Co,Ci,k,k]."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, unbatched = _as_batched(x.data)
    wd = weight.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise DimensionError(f"conv2d weight must be [Co,Ci,k,k]; got {wd.shape}")
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(
            f"conv2d channel axis mismatch: input C={xd.shape[1]} vs weight C_in={wd.shape[1]}")
    k = wd.shape[-1]
    h, w = xd.shape[2], xd.shape[3]
    bad = [name for name, size in (("H", h), ("W", w)) if k > size + 2 * padding]
    if bad:
        raise DimensionError(f"conv2d kernel {k} exceeds padded extent on axes {bad}")
    out = _conv_fwd(xd, wd, stride, padding)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (wd.shape[0],):
            raise DimensionError(f"conv2d bias must be [{wd.shape[0]}]; got {bias.data.shape}")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    _record("conv", conv_flops(k, wd.shape[1], wd.shape[0], out.shape[2], out.shape[3]) * out.shape[0])

    def bw(g):
        g4 = g[None] if unbatched else g
        gx = _conv_adjoint(g4, wd, stride, padding, h, w) if x.requires_grad else None
        if gx is not None and unbatched:
            gx = gx[0]
        gw = _conv_wgrad(xd, g4, k, stride, padding) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return make_node(out[0] if unbatched else out, parents, bw, "conv2d")


def transposed_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is [Ci,Co,k,k].

    Output extent is ``(H-1)*stride - 2*padding + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xd, unbatched = _as_batched(x.data)
    wd = weight.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise DimensionError(f"transposed_conv2d weight must be [Ci,Co,k,k]; got {wd.shape}")
    if stride not in (1, 2):
        raise ContractError(f"transposed_conv2d stride must be 1 or 2, got {stride}")
    if xd.shape[1] != wd.shape[0]:
        raise DimensionError(
            f"transposed_conv2d channel axis mismatch: input C={xd.shape[1]} vs weight C_in={wd.shape[0]}")
    k = wd.shape[-1]
    h_out = (xd.shape[2] - 1) * stride - 2 * padding + k
    w_out = (xd.shape[3] - 1) * stride - 2 * padding + k
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"transposed_conv2d output extent non-positive: H'={h_out}, W'={w_out}")
    out = _conv_adjoint(xd, wd, stride, padding, h_out, w_out)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (wd.shape[1],):
            raise DimensionError(f"transposed_conv2d bias must be [{wd.shape[1]}]; got {bias.data.shape}")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    else:
        out = np.ascontiguousarray(out)
    _record("tconv", conv_flops(k, wd.shape[0], wd.shape[1], xd.shape[2], xd.shape[3]) * xd.shape[0])

    def bw(g):
        g4 = g[None] if unbatched else g
        gx = _conv_fwd(g4, wd, stride, padding) if x.requires_grad else None
        if gx is not None and unbatched:
            gx = gx[0]
        gw = _conv_wgrad(g4, xd, k, stride, padding) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return make_node(out[0] if unbatched else out, parents, bw, "transposed_conv2d")


# ---------------------------------------------------------------------------
# normalization


class RunningStats:
    """Mutable running mean/var buffers of one normalization layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batchnorm_masked(x, active: Optional[np.ndarray], gamma, beta, eps: float = 1e-5,
                     stats: Optional[RunningStats] = None, mode: str = "train") -> Tensor:
    """Batch normalization whose statistics only see active positions.

    ``active`` is a boolean map [N,H,W] (None means every position is active).
    Inactive output positions are exactly zero.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"batchnorm_masked expects [N,C,H,W], got {xd.shape}")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(f"batchnorm_masked gamma/beta must be [{c}]")
    if active is None:
        m = None
        count = n * h * w
        xm = xd
    else:
        active = np.asarray(active, dtype=bool)
        if active.shape != (n, h, w):
            raise DimensionError(f"active map shape {active.shape} != (N,H,W)={(n, h, w)}")
        m = active[:, None]
        count = int(active.sum())
        xm = np.where(m, xd, 0.0)

    if mode == "train":
        if count == 0:
            raise ContractError("degenerate batch: batchnorm_masked saw zero active positions")
        mu = xm.sum(axis=(0, 2, 3)) / count
        centered = xm - mu[None, :, None, None]
        if m is not None:
            centered = np.where(m, centered, 0.0)
        var = (centered * centered).sum(axis=(0, 2, 3)) / count
        if stats is not None:
            unbiased = var * count / (count - 1) if count > 1 else var
            stats.mean = (1 - stats.momentum) * stats.mean + stats.momentum * mu
            stats.var = (1 - stats.momentum) * stats.var + stats.momentum * unbiased
    elif mode == "eval":
        if stats is None:
            raise ContractError("batchnorm_masked eval mode needs running stats")
        mu, var = stats.mean, stats.var
        centered = xm - mu[None, :, None, None]
        if m is not None:
            centered = np.where(m, centered, 0.0)
    else:
        raise ContractError(f"unknown mode {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    if m is not None:
        out = np.where(m, out, 0.0)
    _record("bn", 4 * out.size)
    train = mode == "train"
    gd = gamma.data

    def bw(g):
        if m is not None:
            g = np.where(m, g, 0.0)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[None, :, None, None]
        if train:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (dxhat - s1 / count - xhat * s2 / count) * inv[None, :, None, None]
        else:
            dx = dxhat * inv[None, :, None, None]
        if m is not None:
            dx = np.where(m, dx, 0.0)
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), bw, "batchnorm_masked")
