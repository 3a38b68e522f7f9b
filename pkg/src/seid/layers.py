"""Convolution, pooling, normalization and dense layers with backward rules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, make_result, reshape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent of a square convolution or pooling window."""
    if kernel < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"invalid window kernel={kernel} stride={stride} pad={pad}")
    if size + 2 * pad < kernel:
        raise ShapeError(f"kernel {kernel} larger than padded input {size}+2*{pad}")
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    use_bias: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ShapeError(f"invalid conv spec {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"invalid channel counts in {self}")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @classmethod
    def same(cls, cin: int, cout: int, kernel: int, use_bias: bool = False) -> "ConvSpec":
        return cls(cin, cout, kernel, 1, kernel // 2, use_bias)


@dataclass(frozen=True)
class PoolSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.kind not in ("max", "average", "global-average"):
            raise ShapeError(f"unknown pool kind {self.kind!r}")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormState":
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            np.zeros(channels),
            np.ones(channels),
            **kw,
        )


def _windows(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (N, C, H', W', k, k) view into the padded input
    return sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(dwin: np.ndarray, padded_shape, kernel: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # inverse of _windows: accumulate window gradients in fixed (i, j) order
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[:, :, :, :, i, j]
    return dxp


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Square 2-D convolution via patch expansion and one matrix product."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d expects N x {spec.in_channels} x H x W, got {tuple(x.shape)}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(weight.shape)} != {spec.weight_shape}")
    if spec.use_bias != (bias is not None):
        raise ShapeError("bias presence does not match spec.use_bias")
    n, c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.pad
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    xp = _pad(x.data, p)
    win = _windows(xp, k, s)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, spec.out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, spec.out_channels)
        dw = (gm.T @ cols).reshape(spec.weight_shape)
        dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        dx = _unpad(_scatter_windows(dcols, xp.shape, k, s, ho, wo), p)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, back)


def pool2d(x: Tensor, spec: PoolSpec) -> Tensor:
    """Max, average or global-average pooling over square windows."""
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects N x C x H x W, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if spec.kind == "global-average":
        area = h * w
        out = x.data.mean(axis=(2, 3), keepdims=True)
        return make_result(
            "global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / area, x.data.shape).copy(),)
        )
    k, s, p = spec.kernel, spec.stride, spec.pad
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    if spec.kind == "max":
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x.data
        win = _windows(xp, k, s).reshape(n, c, ho, wo, k * k)
        # np.argmax returns the first maximum: row-major tie rule
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def back(g):
            onehot = arg[..., None] == np.arange(k * k)
            dwin = (onehot * g[..., None]).reshape(n, c, ho, wo, k, k)
            return (_unpad(_scatter_windows(dwin, xp.shape, k, s, ho, wo), p),)

        return make_result("max_pool", np.ascontiguousarray(out), (x,), back)

    xp = _pad(x.data, p)
    win = _windows(xp, k, s)
    out = win.mean(axis=(4, 5))

    def back_avg(g):
        dwin = np.broadcast_to((g / (k * k))[..., None, None], (n, c, ho, wo, k, k))
        return (_unpad(_scatter_windows(dwin, xp.shape, k, s, ho, wo), p),)

    return make_result("avg_pool", np.ascontiguousarray(out), (x,), back_avg)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate N x Ci x H x W maps along channels, in argument order."""
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    if len(xs) == 1:
        return xs[0]
    first = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or not first.concatenable(t.shape, 1):
            raise ShapeError(f"cannot concatenate {tuple(first)} with {tuple(t.shape)}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result("concat", out, xs, back)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}, {stop}) out of range for {x.shape[1]}")
    full = x.data.shape

    def back(g):
        dx = np.zeros(full, dtype=g.dtype)
        dx[:, start:stop] = g
        return (dx,)

    return make_result("slice", x.data[:, start:stop].copy(), (x,), back)


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel batch normalization for N x C (x H x W) inputs.

    Train mode normalizes with batch statistics and updates the running
    estimates in ``state``; eval mode uses the running estimates only.
    """
    c = x.shape[1]
    if state.gamma.shape != (c,) or state.beta.shape != (c,):
        raise ShapeError(f"batch-norm parameters sized {state.gamma.shape[0]} for {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta.data.reshape(bshape)

    if state.mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv.reshape(bshape)
        out = gamma * xhat + beta

        def back_eval(g):
            return g * gamma * inv.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_result("batch_norm", out, (x, state.gamma, state.beta), back_eval)

    m = x.data.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = gamma * xhat + beta

    mom = state.momentum
    unbiased = var.reshape(c) * (m / (m - 1)) if m > 1 else var.reshape(c)
    state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu.reshape(c)
    state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased

    def back(g):
        dxhat = g * gamma
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result("batch_norm", out, (x, state.gamma, state.beta), back)


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with weight shaped D x M."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected of {tuple(x.shape)} and {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} for {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = (g @ wd.T, xd.T @ g)
        return grads if bias is None else grads + (g.sum(axis=0),)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("fully_connected", out, inputs, back)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    if x.ndim != 2:
        raise ShapeError("softmax expects an N x M matrix")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result("softmax", p, (x,), back)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))
