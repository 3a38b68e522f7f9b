"""Squeeze-and-Excitation channel recalibration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, make_result, matmul, relu, sigmoid, transpose


def se_hidden(channels: int, reduction: int) -> int:
    """Width of the excitation bottleneck; ceil when r does not divide C."""
    if reduction < 1:
        raise ShapeError(f"reduction ratio must be >= 1, got {reduction}")
    return max(1, math.ceil(channels / reduction))


def se_param_count(channels: int, reduction: int) -> int:
    h = se_hidden(channels, reduction)
    return 2 * channels * h + h + channels


@dataclass
class SEParams:
    """Excitation weights. ``w1`` is (C/r) x C and ``w2`` is C x (C/r)."""

    channels: int
    reduction: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        c, h = self.channels, se_hidden(self.channels, self.reduction)
        expected = {"w1": (h, c), "b1": (h,), "w2": (c, h), "b2": (c,)}
        for key, shape in expected.items():
            if tuple(getattr(self, key).shape) != shape:
                raise ShapeError(f"SE {key} has shape {tuple(getattr(self, key).shape)}, expected {shape}")

    @property
    def hidden(self) -> int:
        return se_hidden(self.channels, self.reduction)

    def tensors(self) -> tuple:
        return self.w1, self.b1, self.w2, self.b2

    @classmethod
    def init(cls, channels: int, reduction: int, rng: np.random.Generator) -> "SEParams":
        h = se_hidden(channels, reduction)
        return cls(
            channels,
            reduction,
            Tensor(rng.standard_normal((h, channels)) * math.sqrt(2.0 / channels), requires_grad=True),
            Tensor(np.zeros(h), requires_grad=True),
            Tensor(rng.standard_normal((channels, h)) * math.sqrt(2.0 / h), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
        )

    @classmethod
    def zeros(cls, channels: int, reduction: int) -> "SEParams":
        h = se_hidden(channels, reduction)
        return cls(
            channels,
            reduction,
            Tensor(np.zeros((h, channels)), requires_grad=True),
            Tensor(np.zeros(h), requires_grad=True),
            Tensor(np.zeros((channels, h)), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
        )


def squeeze(u: Tensor) -> Tensor:
    """Spatial mean of every channel: N x C x H x W -> N x C."""
    if u.ndim != 4:
        raise ShapeError(f"squeeze expects N x C x H x W, got {tuple(u.shape)}")
    n, c, h, w = u.shape
    area = h * w
    z = u.data.sum(axis=(2, 3)) / area

    def back(g):
        return (np.broadcast_to((g / area)[:, :, None, None], (n, c, h, w)).copy(),)

    return make_result("squeeze", z, (u,), back)


def _row_bias(x: Tensor, b: Tensor) -> Tensor:
    return make_result("bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def excite(z: Tensor, p: SEParams) -> Tensor:
    """Channel gates ``sigmoid(W2 relu(W1 z + b1) + b2)`` in (0, 1)."""
    if z.ndim != 2 or z.shape[1] != p.channels:
        raise ShapeError(f"excite expects N x {p.channels}, got {tuple(z.shape)}")
    inner = relu(_row_bias(matmul(z, transpose(p.w1)), p.b1))
    return sigmoid(_row_bias(matmul(inner, transpose(p.w2)), p.b2))


def se_scale(u: Tensor, s: Tensor) -> Tensor:
    """Multiply channel c of sample n by ``s[n, c]``."""
    if u.ndim != 4 or s.ndim != 2 or tuple(s.shape) != tuple(u.shape[:2]):
        raise ShapeError(f"se_scale of {tuple(u.shape)} by {tuple(s.shape)}")
    ud, sd = u.data, s.data
    out = ud * sd[:, :, None, None]

    def back(g):
        return g * sd[:, :, None, None], (g * ud).sum(axis=(2, 3))

    return make_result("se_scale", out, (u, s), back)


def se_forward(u: Tensor, p: SEParams, bypass: bool = False) -> Tensor:
    """Squeeze, excite and rescale. ``bypass`` forces every gate to 1."""
    if bypass:
        return se_scale(u, Tensor(np.ones(tuple(u.shape[:2]), dtype=u.data.dtype)))
    return se_scale(u, excite(squeeze(u), p))

