"""SE-Inception-D, SE-Inception-T, dense blocks and the convolutional stem.

Parameters live in a flat name -> Tensor mapping. Each block has a
``declare_*`` function that registers the shapes it needs with a
:class:`ParamBuilder` and a ``*_forward`` function that reads them back by
name from a :class:`Context`. Initial values are drawn from a generator seeded
by ``(seed, crc32(name))``, so a parameter's value depends only on its name
and shape. Builds with and without SE units therefore share every non-SE
weight.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import ShapeError
from .layers import (
    BatchNormState,
    ConvSpec,
    PoolSpec,
    batch_norm,
    concat_channels,
    conv2d,
    conv_out_size,
    pool2d,
)
from .se import SEParams, se_forward, se_hidden
from .tensor import Tensor, relu

COMPOSITES = ("bn-relu-conv", "relu-conv")
_PLACEMENTS = {
    "before": "before",
    "before-inception": "before",
    "after": "after",
    "after-inception": "after",
    "none": "none",
}


def normalize_placement(value: str) -> str:
    try:
        return _PLACEMENTS[value]
    except KeyError:
        raise ShapeError(f"unknown SE placement {value!r}; use before, after or none") from None


@dataclass(frozen=True)
class InceptionDConfig:
    growth_rate: int
    se_placement: str = "before"
    reduction: int = 4

    def __post_init__(self):
        object.__setattr__(self, "se_placement", normalize_placement(self.se_placement))
        if self.growth_rate < 1:
            raise ShapeError("growth rate must be >= 1")


@dataclass(frozen=True)
class InceptionTConfig:
    in_channels: int
    se_placement: str = "before"
    reduction: int = 4

    def __post_init__(self):
        object.__setattr__(self, "se_placement", normalize_placement(self.se_placement))
        if self.in_channels < 2:
            raise ShapeError("a transition needs at least 2 input channels")

    @property
    def out_channels(self) -> int:
        return self.in_channels // 2


@dataclass
class DenseBlockState:
    num_layers: int
    entry_channels: int
    growth_rate: int
    features: list = field(default_factory=list)

    def layer_input_channels(self, layer: int) -> int:
        """Input width of 1-based ``layer``: k0 + (l - 1) * k."""
        return self.entry_channels + (layer - 1) * self.growth_rate

    @property
    def out_channels(self) -> int:
        return self.entry_channels + self.num_layers * self.growth_rate


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ParamDecl:
    name: str
    shape: tuple
    init: str  # "he", "zeros" or "ones"
    fan_in: int = 1


class ParamBuilder:
    """Collects parameter and batch-norm buffer declarations."""

    def __init__(self, composite: str = "bn-relu-conv"):
        if composite not in COMPOSITES:
            raise ShapeError(f"unknown composite {composite!r}")
        self.composite = composite
        self.decls: dict[str, ParamDecl] = {}
        self.buffers: dict[str, int] = {}

    def param(self, name: str, shape, init: str, fan_in: int = 1) -> None:
        if name in self.decls:
            raise ShapeError(f"duplicate parameter {name}")
        self.decls[name] = ParamDecl(name, tuple(shape), init, fan_in)

    def batch_norm(self, name: str, channels: int) -> None:
        self.param(f"{name}.gamma", (channels,), "ones")
        self.param(f"{name}.beta", (channels,), "zeros")
        self.buffers[name] = channels

    def count(self, prefix: str = "") -> int:
        return sum(math.prod(d.shape) for n, d in self.decls.items() if n.startswith(prefix))

    def initialize(self, seed: int) -> tuple[dict, dict]:
        params = {}
        for name, d in self.decls.items():
            if d.init == "he":
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                value = rng.standard_normal(d.shape) * math.sqrt(2.0 / d.fan_in)
            elif d.init == "ones":
                value = np.ones(d.shape)
            else:
                value = np.zeros(d.shape)
            params[name] = Tensor(value, requires_grad=True, name=name)
        buffers = {}
        for name, c in self.buffers.items():
            buffers[f"{name}.mean"] = np.zeros(c)
            buffers[f"{name}.var"] = np.ones(c)
        return params, buffers


@dataclass
class Context:
    """Everything a forward pass reads: parameters, BN buffers and mode flags."""

    params: Mapping[str, Tensor]
    buffers: dict
    training: bool = False
    se_bypass: bool = False
    composite: str = "bn-relu-conv"

    def bn(self, x: Tensor, name: str) -> Tensor:
        state = BatchNormState(
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.mean"],
            self.buffers[f"{name}.var"],
            mode="train" if self.training else "eval",
        )
        return batch_norm(x, state)


def build_context(builder: ParamBuilder, seed: int = 0, training: bool = False) -> Context:
    params, buffers = builder.initialize(seed)
    return Context(params, buffers, training=training, composite=builder.composite)


# --------------------------------------------------------------------------
# units


def declare_conv_unit(b: ParamBuilder, name: str, spec: ConvSpec) -> None:
    """BN -> ReLU -> Conv (or ReLU -> Conv with bias)."""
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    if b.composite == "bn-relu-conv":
        b.batch_norm(f"{name}.bn", spec.in_channels)
        b.param(f"{name}.weight", spec.weight_shape, "he", fan_in)
    else:
        b.param(f"{name}.weight", spec.weight_shape, "he", fan_in)
        b.param(f"{name}.bias", (spec.out_channels,), "zeros")


def conv_unit(x: Tensor, ctx: Context, name: str, spec: ConvSpec) -> Tensor:
    if ctx.composite == "bn-relu-conv":
        h = relu(ctx.bn(x, f"{name}.bn"))
        return conv2d(h, spec, ctx.params[f"{name}.weight"])
    spec = ConvSpec(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.pad, True)
    return conv2d(relu(x), spec, ctx.params[f"{name}.weight"], ctx.params[f"{name}.bias"])


def declare_stem_conv(b: ParamBuilder, name: str, spec: ConvSpec) -> None:
    """Conv -> BN -> ReLU (or Conv with bias -> ReLU); the stem sees raw pixels."""
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    b.param(f"{name}.weight", spec.weight_shape, "he", fan_in)
    if b.composite == "bn-relu-conv":
        b.batch_norm(f"{name}.bn", spec.out_channels)
    else:
        b.param(f"{name}.bias", (spec.out_channels,), "zeros")


def stem_conv(x: Tensor, ctx: Context, name: str, spec: ConvSpec) -> Tensor:
    if ctx.composite == "bn-relu-conv":
        return relu(ctx.bn(conv2d(x, spec, ctx.params[f"{name}.weight"]), f"{name}.bn"))
    spec = ConvSpec(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.pad, True)
    return relu(conv2d(x, spec, ctx.params[f"{name}.weight"], ctx.params[f"{name}.bias"]))


def declare_se(b: ParamBuilder, name: str, channels: int, reduction: int) -> None:
    h = se_hidden(channels, reduction)
    b.param(f"{name}.w1", (h, channels), "he", channels)
    b.param(f"{name}.b1", (h,), "zeros")
    b.param(f"{name}.w2", (channels, h), "he", h)
    b.param(f"{name}.b2", (channels,), "zeros")


def se_unit(x: Tensor, ctx: Context, name: str, reduction: int) -> Tensor:
    p = ctx.params
    se = SEParams(x.shape[1], reduction, p[f"{name}.w1"], p[f"{name}.b1"], p[f"{name}.w2"], p[f"{name}.b2"])
    return se_forward(x, se, bypass=ctx.se_bypass)


# --------------------------------------------------------------------------
# SE-Inception-D


def _d_specs(cin: int, k: int) -> dict:
    return {
        "a": ConvSpec.same(cin, k, 1),
        "b_reduce": ConvSpec.same(cin, 4 * k, 1),
        "b_conv": ConvSpec.same(4 * k, k, 3),
        "c_reduce": ConvSpec.same(cin, 4 * k, 1),
        "c_conv1": ConvSpec.same(4 * k, k, 3),
        "c_conv2": ConvSpec.same(k, k, 3),
        "merge": ConvSpec.same(3 * k, k, 1),
    }


def declare_inception_d(b: ParamBuilder, prefix: str, cin: int, cfg: InceptionDConfig) -> None:
    if cfg.se_placement == "before":
        declare_se(b, f"{prefix}.se", cin, cfg.reduction)
    elif cfg.se_placement == "after":
        declare_se(b, f"{prefix}.se", 3 * cfg.growth_rate, cfg.reduction)
    for key, spec in _d_specs(cin, cfg.growth_rate).items():
        declare_conv_unit(b, f"{prefix}.{key}", spec)


def inception_d_forward(x: Tensor, cfg: InceptionDConfig, ctx: Context, prefix: str = "d") -> Tensor:
    """One dense-block layer: N x Cin x H x W -> N x k x H x W."""
    if x.ndim != 4:
        raise ShapeError(f"inception_d expects N x C x H x W, got {tuple(x.shape)}")
    specs = _d_specs(x.shape[1], cfg.growth_rate)
    w = ctx.params.get(f"{prefix}.a.weight")
    if w is None or w.shape[1] != x.shape[1]:
        raise ShapeError(f"{prefix}: input has {x.shape[1]} channels, layer was built for a different width")
    if cfg.se_placement == "before":
        x = se_unit(x, ctx, f"{prefix}.se", cfg.reduction)
    a = conv_unit(x, ctx, f"{prefix}.a", specs["a"])
    bb = conv_unit(x, ctx, f"{prefix}.b_reduce", specs["b_reduce"])
    bb = conv_unit(bb, ctx, f"{prefix}.b_conv", specs["b_conv"])
    c = conv_unit(x, ctx, f"{prefix}.c_reduce", specs["c_reduce"])
    c = conv_unit(c, ctx, f"{prefix}.c_conv1", specs["c_conv1"])
    c = conv_unit(c, ctx, f"{prefix}.c_conv2", specs["c_conv2"])
    merged = concat_channels([a, bb, c])
    if cfg.se_placement == "after":
        merged = se_unit(merged, ctx, f"{prefix}.se", cfg.reduction)
    return conv_unit(merged, ctx, f"{prefix}.merge", specs["merge"])


# --------------------------------------------------------------------------
# dense block


def declare_dense_block(b: ParamBuilder, prefix: str, k0: int, num_layers: int, cfg: InceptionDConfig) -> int:
    state = DenseBlockState(num_layers, k0, cfg.growth_rate)
    for layer in range(1, num_layers + 1):
        declare_inception_d(b, f"{prefix}.layer{layer}", state.layer_input_channels(layer), cfg)
    return state.out_channels


def dense_block_forward(
    x0: Tensor, num_layers: int, cfg: InceptionDConfig, ctx: Context, prefix: str = "block"
) -> Tensor:
    """Return ``[x0, x1, ..., xL]`` where each ``xl`` sees the concat of its predecessors."""
    state = DenseBlockState(num_layers, x0.shape[1], cfg.growth_rate, [x0])
    running = x0
    for layer in range(1, num_layers + 1):
        out = inception_d_forward(running, cfg, ctx, f"{prefix}.layer{layer}")
        state.features.append(out)
        running = concat_channels(state.features)
    return running


# --------------------------------------------------------------------------
# SE-Inception-T


def _t_specs(cin: int) -> dict:
    half = cin // 2
    return {
        "a_reduce": ConvSpec.same(cin, half, 1),
        "b_reduce": ConvSpec.same(cin, half, 1),
        "b_conv": ConvSpec(half, half, 3, 2, 0),
        "c_reduce": ConvSpec.same(cin, half, 1),
        "c_conv1": ConvSpec.same(half, half, 3),
        "c_conv2": ConvSpec(half, half, 3, 2, 0),
        "merge": ConvSpec.same(3 * half, half, 1),
    }


TRANSITION_POOL = PoolSpec("max", 3, 2, 0)


def transition_out_size(size: int) -> int:
    return conv_out_size(size, 3, 2, 0)


def declare_inception_t(b: ParamBuilder, prefix: str, cfg: InceptionTConfig) -> None:
    half = cfg.out_channels
    if cfg.se_placement == "before":
        declare_se(b, f"{prefix}.se", cfg.in_channels, cfg.reduction)
    elif cfg.se_placement == "after":
        declare_se(b, f"{prefix}.se", 3 * half, cfg.reduction)
    for key, spec in _t_specs(cfg.in_channels).items():
        declare_conv_unit(b, f"{prefix}.{key}", spec)


def inception_t_forward(x: Tensor, cfg: InceptionTConfig, ctx: Context, prefix: str = "t") -> Tensor:
    """Grid reduction: N x C x H x W -> N x floor(C/2) x H' x W'."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"{prefix}: expected {cfg.in_channels} input channels, got {tuple(x.shape)}")
    if min(x.shape[2], x.shape[3]) < 3:
        raise ShapeError(f"{prefix}: spatial size {tuple(x.shape[2:])} too small for a 3x3 stride-2 reduction")
    specs = _t_specs(cfg.in_channels)
    if cfg.se_placement == "before":
        x = se_unit(x, ctx, f"{prefix}.se", cfg.reduction)
    a = pool2d(conv_unit(x, ctx, f"{prefix}.a_reduce", specs["a_reduce"]), TRANSITION_POOL)
    bb = conv_unit(x, ctx, f"{prefix}.b_reduce", specs["b_reduce"])
    bb = conv_unit(bb, ctx, f"{prefix}.b_conv", specs["b_conv"])
    c = conv_unit(x, ctx, f"{prefix}.c_reduce", specs["c_reduce"])
    c = conv_unit(c, ctx, f"{prefix}.c_conv1", specs["c_conv1"])
    c = conv_unit(c, ctx, f"{prefix}.c_conv2", specs["c_conv2"])
    merged = concat_channels([a, bb, c])
    if cfg.se_placement == "after":
        merged = se_unit(merged, ctx, f"{prefix}.se", cfg.reduction)
    return conv_unit(merged, ctx, f"{prefix}.merge", specs["merge"])


# --------------------------------------------------------------------------
# stem


STEM_POOL = PoolSpec("max", 3, 2, 0)


def stem_specs(in_channels: int, k: int) -> list:
    return [
        ("conv1", ConvSpec.same(in_channels, k, 3)),
        ("conv2", ConvSpec.same(k, k, 3)),
        ("pool1", STEM_POOL),
        ("conv3", ConvSpec.same(k, 2 * k, 3)),
        ("conv4", ConvSpec.same(2 * k, 2 * k, 3)),
        ("pool2", STEM_POOL),
    ]


def declare_stem(b: ParamBuilder, k: int, in_channels: int = 3, prefix: str = "stem") -> None:
    for name, spec in stem_specs(in_channels, k):
        if isinstance(spec, ConvSpec):
            declare_stem_conv(b, f"{prefix}.{name}", spec)


def stem_forward(
    x: Tensor, k: int, ctx: Context, prefix: str = "stem", expected_size: Optional[int] = None
) -> Tensor:
    """Two 3x3 convs, max pool, two 3x3 convs, max pool: 2k channels out."""
    if x.ndim != 4:
        raise ShapeError(f"stem expects N x C x H x W, got {tuple(x.shape)}")
    if expected_size is not None and tuple(x.shape[2:]) != (expected_size, expected_size):
        raise ShapeError(f"stem expects {expected_size}x{expected_size} input, got {tuple(x.shape[2:])}")
    for name, spec in stem_specs(x.shape[1], k):
        if isinstance(spec, PoolSpec):
            x = pool2d(x, spec)
        else:
            x = stem_conv(x, ctx, f"{prefix}.{name}", spec)
    return x
