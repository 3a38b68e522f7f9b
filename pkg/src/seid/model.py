"""Full SE-Inception-DenseNet assembly, shape report and checkpoints.

Config file grammar: one ``key=value`` per line, ``#`` starts a comment,
blank lines ignored. Lists are comma separated (``block_layers=3,3,5``).
Recognized keys are the fields of :class:`ArchitectureConfig`.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .blocks import (
    COMPOSITES,
    Context,
    InceptionDConfig,
    InceptionTConfig,
    ParamBuilder,
    declare_dense_block,
    declare_inception_t,
    declare_stem,
    dense_block_forward,
    inception_t_forward,
    normalize_placement,
    stem_forward,
    stem_specs,
    transition_out_size,
)
from .errors import ConfigError, ShapeError
from .layers import PoolSpec, conv_out_size, fully_connected, pool2d, softmax
from .tensor import Tensor, reshape

TABLE1_CLASSES = 10575


@dataclass(frozen=True)
class ArchitectureConfig:
    growth_rate: int = 48
    reduction: int = 4
    block_layers: tuple = (3, 3, 5)
    se_placement: str = "before"
    num_classes: int = TABLE1_CLASSES
    input_size: int = 128
    input_channels: int = 3
    composite: str = "bn-relu-conv"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(v) for v in self.block_layers))
        try:
            object.__setattr__(self, "se_placement", normalize_placement(self.se_placement))
        except ShapeError as exc:
            raise ConfigError(str(exc)) from None
        if not self.block_layers or any(v < 0 for v in self.block_layers):
            raise ConfigError("block_layers must be a nonempty list of non-negative ints")
        for key in ("growth_rate", "reduction", "num_classes", "input_size", "input_channels"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.composite not in COMPOSITES:
            raise ConfigError(f"composite must be one of {COMPOSITES}")

    def replace(self, **changes) -> "ArchitectureConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


ARCH_KEYS = {f.name: f.type for f in dataclasses.fields(ArchitectureConfig)}
_ALIASES = {"k": "growth_rate", "r": "reduction"}


def parse_key_values(text: str) -> dict:
    """Parse ``key=value`` lines into a dict of raw strings (later lines win)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(key: str, value):
    if key == "block_layers":
        if isinstance(value, str):
            return tuple(int(v) for v in value.split(",") if v.strip())
        return tuple(int(v) for v in value)
    if key in ("se_placement", "composite"):
        return str(value)
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} expects an integer, got {value!r}") from None


def config_from_mapping(values: Mapping, base: Optional[ArchitectureConfig] = None) -> ArchitectureConfig:
    """Apply key/value pairs on top of ``base``; unknown keys are errors."""
    changes = {}
    for key, value in values.items():
        key = _ALIASES.get(key, key)
        if key not in ARCH_KEYS:
            raise ConfigError(f"unknown architecture key {key!r}")
        changes[key] = _coerce(key, value)
    return (base or ArchitectureConfig()).replace(**changes)


def load_config(path, base: Optional[ArchitectureConfig] = None) -> ArchitectureConfig:
    return config_from_mapping(parse_key_values(Path(path).read_text()), base)


# --------------------------------------------------------------------------
# stage plan


@dataclass
class Stage:
    name: str
    label: str
    filter: str
    channels: int
    size: int
    kind: str
    layers: int = 0
    in_channels: int = 0

    @property
    def output(self) -> str:
        if self.kind == "fc":
            return str(self.channels)
        return f"{self.size}*{self.size}*{self.channels}"


def plan_stages(cfg: ArchitectureConfig) -> list:
    """Walk the architecture, tracking channels and spatial size per stage."""
    k = cfg.growth_rate
    tag = "" if cfg.se_placement == "none" else "SE-"
    stages, size, ch = [], cfg.input_size, cfg.input_channels
    for name, spec in stem_specs(cfg.input_channels, k):
        try:
            if isinstance(spec, PoolSpec):
                size = conv_out_size(size, spec.kernel, spec.stride, spec.pad)
                stages.append(Stage(f"stem.{name}", "Maxpooling", "3, 2, 0", ch, size, "pool"))
            else:
                size = conv_out_size(size, spec.kernel, spec.stride, spec.pad)
                ch = spec.out_channels
                stages.append(Stage(f"stem.{name}", "Conv", "3, 1, 1", ch, size, "conv"))
        except ShapeError:
            raise ConfigError(f"input size {cfg.input_size} underflows at layer stem.{name}") from None
    nblocks = len(cfg.block_layers)
    for i, layers in enumerate(cfg.block_layers, 1):
        cin = ch
        ch = ch + layers * k
        stages.append(
            Stage(f"block{i}", f"{layers}*{tag}Inception-D", "-", ch, size, "block", layers, cin)
        )
        if i < nblocks:
            if size < 3:
                raise ConfigError(f"spatial size {size} underflows at layer trans{i}")
            if ch < 2:
                raise ConfigError(f"channel count {ch} too small at layer trans{i}")
            cin, size, ch = ch, transition_out_size(size), ch // 2
            stages.append(Stage(f"trans{i}", f"{tag}Inception-T", "-", ch, size, "transition", 0, cin))
    stages.append(Stage("pool", "Average Pooling", f"{size}, 1, 0", ch, 1, "gap"))
    stages.append(Stage("fc", "Softmax", "-", cfg.num_classes, 1, "fc", 0, ch))
    return stages


def table1_template(k: int) -> list:
    """Table 1 rows (layer type, filter/stride/pad, output size) with k substituted."""

    def c(mult: str) -> str:
        v = Fraction(mult) * k
        return str(math.floor(v))

    return [
        ("Conv", "3, 1, 1", f"128*128*{c('1')}"),
        ("Conv", "3, 1, 1", f"128*128*{c('1')}"),
        ("Maxpooling", "3, 2, 0", f"63*63*{c('1')}"),
        ("Conv", "3, 1, 1", f"63*63*{c('2')}"),
        ("Conv", "3, 1, 1", f"63*63*{c('2')}"),
        ("Maxpooling", "3, 2, 0", f"31*31*{c('2')}"),
        ("3*SE-Inception-D", "-", f"31*31*{c('5')}"),
        ("SE-Inception-T", "-", f"15*15*{c('2.5')}"),
        ("3*SE-Inception-D", "-", f"15*15*{c('5.5')}"),
        ("SE-Inception-T", "-", f"7*7*{c('2.75')}"),
        ("5*SE-Inception-D", "-", f"7*7*{c('7.75')}"),
        ("Average Pooling", "7, 1, 0", f"1*1*{c('7.75')}"),
        ("Softmax", "-", f"{TABLE1_CLASSES}"),
    ]


# --------------------------------------------------------------------------
# model


@dataclass
class LayerSummary:
    name: str
    layer_type: str
    filter: str
    output: str
    channels: int
    height: int
    width: int
    params: int

    def as_row(self) -> tuple:
        return (self.layer_type, self.filter, self.output)


@dataclass
class Model:
    config: ArchitectureConfig
    stages: list
    builder: ParamBuilder
    params: dict
    buffers: dict = field(default_factory=dict)

    @property
    def feature_width(self) -> int:
        return self.stages[-2].channels

    def param_count(self, prefix: str = "") -> int:
        return self.builder.count(prefix)

    def context(self, training: bool = False, se_bypass: bool = False, params=None) -> Context:
        return Context(
            self.params if params is None else params,
            self.buffers,
            training=training,
            se_bypass=se_bypass,
            composite=self.config.composite,
        )

    def forward(self, x: Tensor, training: bool = False, se_bypass: bool = False, params=None):
        """Return ``(logits, features)`` for an N x C x H x W batch."""
        cfg = self.config
        if x.ndim != 4 or tuple(x.shape[1:]) != (cfg.input_channels, cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"expected N x {cfg.input_channels} x {cfg.input_size} x {cfg.input_size}, got {tuple(x.shape)}"
            )
        ctx = self.context(training, se_bypass, params)
        k = cfg.growth_rate
        dcfg = InceptionDConfig(k, cfg.se_placement, cfg.reduction)
        h = stem_forward(x, k, ctx)
        for st in self.stages:
            if st.kind == "block":
                h = dense_block_forward(h, st.layers, dcfg, ctx, st.name)
            elif st.kind == "transition":
                tcfg = InceptionTConfig(st.in_channels, cfg.se_placement, cfg.reduction)
                h = inception_t_forward(h, tcfg, ctx, st.name)
        pooled = pool2d(h, PoolSpec("global-average"))
        features = reshape(pooled, (x.shape[0], pooled.shape[1]))
        logits = fully_connected(features, ctx.params["fc.weight"], ctx.params["fc.bias"])
        return logits, features


def _declare(cfg: ArchitectureConfig, stages: list) -> ParamBuilder:
    b = ParamBuilder(cfg.composite)
    declare_stem(b, cfg.growth_rate, cfg.input_channels)
    dcfg = InceptionDConfig(cfg.growth_rate, cfg.se_placement, cfg.reduction)
    for st in stages:
        if st.kind == "block":
            declare_dense_block(b, st.name, st.in_channels, st.layers, dcfg)
        elif st.kind == "transition":
            declare_inception_t(b, st.name, InceptionTConfig(st.in_channels, cfg.se_placement, cfg.reduction))
        elif st.kind == "fc":
            b.param("fc.weight", (st.in_channels, st.channels), "he", st.in_channels)
            b.param("fc.bias", (st.channels,), "zeros")
    return b


def build_model(cfg: ArchitectureConfig) -> Model:
    """Plan, declare and initialize a network; deterministic in ``cfg.seed``."""
    stages = plan_stages(cfg)
    builder = _declare(cfg, stages)
    params, buffers = builder.initialize(cfg.seed)
    return Model(cfg, stages, builder, params, buffers)


def describe(model: Model) -> list:
    rows = []
    for st in model.stages:
        if st.kind in ("conv", "pool"):
            prefix = st.name + "."
        elif st.kind == "gap":
            prefix = None
        else:
            prefix = st.name + "."
        count = model.param_count(prefix) if prefix else 0
        h = w = 1 if st.kind == "fc" else st.size
        rows.append(LayerSummary(st.name, st.label, st.filter, st.output, st.channels, h, w, count))
    return rows


def format_table(rows: Iterable[LayerSummary]) -> str:
    lines = [f"{'Layer Type':<20}{'Filter Size, Stride, Pad':<26}{'Output Size':<16}{'Params':>12}"]
    total = 0
    for r in rows:
        lines.append(f"{r.layer_type:<20}{r.filter:<26}{r.output:<16}{r.params:>12}")
        total += r.params
    lines.append(f"{'Total':<62}{total:>12}")
    return "\n".join(lines) + "\n"


def check_table1(model: Model) -> list:
    """Return mismatches between ``describe(model)`` and Table 1; empty when equal."""
    cfg = model.config
    if cfg.input_size != 128 or cfg.block_layers != (3, 3, 5) or cfg.num_classes != TABLE1_CLASSES:
        return [f"config differs from the Table 1 layout ({cfg.input_size}, {cfg.block_layers}, {cfg.num_classes})"]
    got = [r.as_row() for r in describe(model)]
    want = table1_template(cfg.growth_rate)
    problems = []
    if len(got) != len(want):
        problems.append(f"row count {len(got)} != {len(want)}")
    for i, (g, w) in enumerate(zip(got, want)):
        if g != w:
            problems.append(f"row {i + 1}: got {g}, expected {w}")
    return problems


def classify_forward(model: Model, batch: Tensor) -> Tensor:
    logits, _ = model.forward(batch, training=False)
    return softmax(logits)


def extract_features(model: Model, batch: Tensor) -> Tensor:
    _, features = model.forward(batch, training=False)
    return features


# --------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.txt"
BLOB = "params.bin"


def save_checkpoint(path, model: Model, extra: Optional[Mapping[str, np.ndarray]] = None, meta: Optional[Mapping] = None):
    """Write ``manifest.txt`` and a flat float64 little-endian ``params.bin``.

    Manifest lines: ``config <key>=<value>``, ``meta <key>=<value>`` and
    ``tensor <name> <dims,comma,separated> <byte offset>``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = [(f"param/{n}", t.data) for n, t in model.params.items()]
    entries += [(f"buffer/{n}", a) for n, a in model.buffers.items()]
    entries += [(f"extra/{n}", np.asarray(a)) for n, a in (extra or {}).items()]
    lines = ["# seid checkpoint v1"]
    lines += [f"config {line}" for line in model.config.to_text().splitlines()]
    lines += [f"meta {k}={v}" for k, v in (meta or {}).items()]
    offset = 0
    tmp_blob = path / (BLOB + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for name, arr in entries:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            dims = ",".join(map(str, arr.shape)) or "-"
            lines.append(f"tensor {name} {dims} {offset}")
            fh.write(arr.tobytes())
            offset += arr.nbytes
    os.replace(tmp_blob, path / BLOB)
    (path / MANIFEST).write_text("\n".join(lines) + "\n")


def read_checkpoint(path):
    """Return ``(config, tensors, meta)`` where tensors maps names to arrays."""
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.exists():
        raise ConfigError(f"no checkpoint manifest at {manifest}")
    blob = (path / BLOB).read_bytes()
    cfg_values, meta, tensors = {}, {}, {}
    for line in manifest.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        kind, rest = line.split(" ", 1)
        if kind == "config":
            k, v = rest.split("=", 1)
            cfg_values[k] = v
        elif kind == "meta":
            k, v = rest.split("=", 1)
            meta[k] = v
        elif kind == "tensor":
            name, dims, off = rest.split(" ")
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            count = math.prod(shape)
            start = int(off)
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        else:
            raise ConfigError(f"bad manifest line {line!r}")
    return config_from_mapping(cfg_values), tensors, meta


def load_checkpoint(path):
    """Rebuild a model from a checkpoint. Returns ``(model, extras, meta)``."""
    cfg, tensors, meta = read_checkpoint(path)
    model = build_model(cfg)
    for name in model.params:
        arr = tensors[f"param/{name}"]
        model.params[name] = Tensor(arr, requires_grad=True, name=name)
    for name in model.buffers:
        model.buffers[name] = tensors[f"buffer/{name}"]
    extras = {n[len("extra/"):]: a for n, a in tensors.items() if n.startswith("extra/")}
    return model, extras, meta


__all__ = [
    "ArchitectureConfig",
    "LayerSummary",
    "Model",
    "build_model",
    "check_table1",
    "classify_forward",
    "describe",
    "extract_features",
    "format_table",
    "load_checkpoint",
    "load_config",
    "plan_stages",
    "save_checkpoint",
    "table1_template",
]
