"""Finite-difference checks over every layer and composite block.

Each component is a miniature configuration; the scalar objective is
``sum(output * R)`` for a fixed random ``R`` so no gradient is trivially
uniform. Both the input and every parameter tensor are checked. Block
inputs use a batch of 2: with a single sample, train-mode batch norm
cancels any per-channel gate in front of it and SE gradients vanish.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import layers as L
from .blocks import (
    Context,
    InceptionDConfig,
    InceptionTConfig,
    ParamBuilder,
    build_context,
    declare_dense_block,
    declare_inception_d,
    declare_inception_t,
    declare_stem,
    dense_block_forward,
    inception_d_forward,
    inception_t_forward,
    stem_forward,
)
from .se import SEParams, excite, se_forward, se_scale, squeeze
from .tensor import Tensor, add, grad_check, matmul, mul, relu, sigmoid, sub
from .tensor import sum as tsum
from .training import ClassCenters, LossConfig, joint_loss


@dataclass
class ComponentResult:
    component: str
    max_rel_error: float
    passed: bool
    checked: int
    excluded: int
    seconds: float


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(tuple(out.shape)))
    return lambda y: tsum(mul(y, r))


def _check_all(fn, inputs: dict, rng, step, tolerance):
    """Check ``fn(**inputs)`` against every named input in turn."""
    base = {k: Tensor(v) for k, v in inputs.items()}
    objective = _weighted(fn(**base), rng)
    worst, checked, excluded = 0.0, 0, 0
    for name, value in inputs.items():

        def f(t, name=name):
            args = dict(base)
            args[name] = t
            return objective(fn(**args))

        res = grad_check(f, value, step=step, tolerance=tolerance)
        worst = max(worst, res.max_rel_error)
        checked += res.checked
        excluded += res.excluded
    return worst, checked, excluded


def _block_check(fn, x: np.ndarray, ctx: Context, rng, step, tolerance):
    params = dict(ctx.params)

    def run(x, **p):
        c = Context({**params, **p}, ctx.buffers, training=ctx.training, composite=ctx.composite)
        return fn(x, c)

    inputs = {"x": x}
    inputs.update({name: t.data for name, t in params.items()})
    return _check_all(run, inputs, rng, step, tolerance)


def _randomize(ctx: Context, rng) -> Context:
    params = {}
    for name, t in ctx.params.items():
        # move ones/zeros away from special points so every path is exercised
        params[name] = Tensor(t.data + 0.1 * rng.standard_normal(t.data.shape), requires_grad=True)
    return Context(params, ctx.buffers, training=ctx.training, composite=ctx.composite)


def _components():
    def elementwise(rng):
        a = rng.uniform(-1, 1, (2, 3, 4, 4))
        b = rng.uniform(-1, 1, (2, 3, 4, 4))
        ch = rng.uniform(-1, 1, (1, 3, 1, 1))
        return lambda a, b, ch: add(mul(sigmoid(a), b), sub(relu(a), ch)), {"a": a, "b": b, "ch": ch}

    def matmul_(rng):
        return lambda a, b: matmul(a, b), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}

    def conv(rng):
        spec = L.ConvSpec(3, 5, 3, 2, 0)
        return (lambda x, w: L.conv2d(x, spec, w)), {
            "x": rng.standard_normal((2, 3, 8, 8)),
            "w": rng.standard_normal(spec.weight_shape),
        }

    def conv_bias(rng):
        spec = L.ConvSpec(2, 3, 3, 1, 1, True)
        return (lambda x, w, b: L.conv2d(x, spec, w, b)), {
            "x": rng.standard_normal((2, 2, 5, 5)),
            "w": rng.standard_normal(spec.weight_shape),
            "b": rng.standard_normal(3),
        }

    def max_pool(rng):
        return (lambda x: L.pool2d(x, L.PoolSpec("max", 3, 2, 0))), {"x": rng.standard_normal((2, 2, 7, 7))}

    def avg_pool(rng):
        return (lambda x: L.pool2d(x, L.PoolSpec("average", 3, 2, 1))), {"x": rng.standard_normal((2, 2, 7, 7))}

    def global_pool(rng):
        return (lambda x: L.pool2d(x, L.PoolSpec("global-average"))), {"x": rng.standard_normal((2, 3, 5, 5))}

    def batch_norm(rng):
        c = 3

        def fn(x, gamma, beta):
            state = L.BatchNormState(gamma, beta, np.zeros(c), np.ones(c), mode="train")
            return L.batch_norm(x, state)

        return fn, {
            "x": rng.standard_normal((4, c, 3, 3)),
            "gamma": rng.uniform(0.5, 1.5, c),
            "beta": rng.standard_normal(c),
        }

    def batch_norm_eval(rng):
        c = 3
        mean, var = rng.standard_normal(c), rng.uniform(0.5, 2, c)

        def fn(x, gamma, beta):
            return L.batch_norm(x, L.BatchNormState(gamma, beta, mean, var, mode="eval"))

        return fn, {"x": rng.standard_normal((2, c, 3, 3)), "gamma": rng.uniform(0.5, 1.5, c), "beta": rng.standard_normal(c)}

    def fc(rng):
        return (lambda x, w, b: L.fully_connected(x, w, b)), {
            "x": rng.standard_normal((4, 5)),
            "w": rng.standard_normal((5, 3)),
            "b": rng.standard_normal(3),
        }

    def softmax(rng):
        return (lambda x: L.softmax(x)), {"x": rng.standard_normal((3, 4))}

    def concat(rng):
        return (lambda a, b: L.concat_channels([a, b])), {
            "a": rng.standard_normal((2, 2, 3, 3)),
            "b": rng.standard_normal((2, 3, 3, 3)),
        }

    def composite(rng):
        spec = L.ConvSpec(2, 3, 3, 1, 1)

        def fn(x, w, fw, fb):
            h = L.pool2d(relu(L.conv2d(x, spec, w)), L.PoolSpec("max", 3, 2, 0))
            return L.fully_connected(L.flatten(h), fw, fb)

        return fn, {
            "x": rng.standard_normal((2, 2, 6, 6)),
            "w": rng.standard_normal(spec.weight_shape),
            "fw": rng.standard_normal((12, 4)),
            "fb": rng.standard_normal(4),
        }

    def se_forward_(rng):
        c, r = 4, 2

        def fn(u, w1, b1, w2, b2):
            return se_forward(u, SEParams(c, r, w1, b1, w2, b2))

        return fn, {
            "u": rng.standard_normal((1, c, 3, 3)),
            "w1": rng.standard_normal((2, c)),
            "b1": rng.standard_normal(2) * 0.1,
            "w2": rng.standard_normal((c, 2)),
            "b2": rng.standard_normal(c) * 0.1,
        }

    def se_parts(rng):
        c, r = 4, 2

        def fn(u, z, w1, b1, w2, b2, s):
            p = SEParams(c, r, w1, b1, w2, b2)
            return add(se_scale(u, s), se_scale(u, add(excite(z, p), squeeze(u))))

        return fn, {
            "u": rng.standard_normal((2, c, 3, 3)),
            "z": rng.standard_normal((2, c)),
            "w1": rng.standard_normal((2, c)),
            "b1": rng.standard_normal(2) * 0.1,
            "w2": rng.standard_normal((c, 2)),
            "b2": rng.standard_normal(c) * 0.1,
            "s": rng.uniform(0, 1, (2, c)),
        }

    def joint(rng):
        n, m, d = 4, 3, 5
        centers = ClassCenters(rng.standard_normal((m, d)))
        y = rng.integers(0, m, n)
        return (lambda logits, feats: joint_loss(logits, feats, y, centers, LossConfig(0.01, 0.9))), {
            "logits": rng.standard_normal((n, m)),
            "feats": rng.standard_normal((n, d)),
        }

    return {
        "elementwise": elementwise,
        "matmul": matmul_,
        "conv2d": conv,
        "conv2d_bias": conv_bias,
        "max_pool": max_pool,
        "avg_pool": avg_pool,
        "global_avg_pool": global_pool,
        "batch_norm": batch_norm,
        "batch_norm_eval": batch_norm_eval,
        "fully_connected": fc,
        "softmax": softmax,
        "concat": concat,
        "conv_relu_pool_fc": composite,
        "se_forward": se_forward_,
        "se_parts": se_parts,
        "joint_loss": joint,
    }


def _block_components():
    def inception_d(rng, composite="bn-relu-conv", placement="before"):
        cfg = InceptionDConfig(4, placement, 2)
        b = ParamBuilder(composite)
        declare_inception_d(b, "d", 8, cfg)
        ctx = _randomize(build_context(b, seed=1, training=True), rng)
        return (lambda x, c: inception_d_forward(x, cfg, c, "d")), rng.standard_normal((2, 8, 6, 6)), ctx

    def inception_d_after(rng):
        return inception_d(rng, placement="after")

    def inception_d_relu_conv(rng):
        return inception_d(rng, composite="relu-conv")

    def inception_t(rng, placement="before"):
        cfg = InceptionTConfig(6, placement, 2)
        b = ParamBuilder()
        declare_inception_t(b, "t", cfg)
        ctx = _randomize(build_context(b, seed=2, training=True), rng)
        return (lambda x, c: inception_t_forward(x, cfg, c, "t")), rng.standard_normal((2, 6, 7, 7)), ctx

    def inception_t_after(rng):
        return inception_t(rng, placement="after")

    def dense_block(rng):
        cfg = InceptionDConfig(2, "before", 2)
        b = ParamBuilder()
        declare_dense_block(b, "blk", 4, 2, cfg)
        ctx = _randomize(build_context(b, seed=3, training=True), rng)
        return (lambda x, c: dense_block_forward(x, 2, cfg, c, "blk")), rng.standard_normal((2, 4, 4, 4)), ctx

    def stem(rng):
        b = ParamBuilder()
        declare_stem(b, 2, 1)
        ctx = _randomize(build_context(b, seed=4, training=True), rng)
        return (lambda x, c: stem_forward(x, 2, c)), rng.standard_normal((2, 1, 9, 9)), ctx

    return {
        "inception_d": inception_d,
        "inception_d_after": inception_d_after,
        "inception_d_relu_conv": inception_d_relu_conv,
        "inception_t": inception_t,
        "inception_t_after": inception_t_after,
        "dense_block": dense_block,
        "stem": stem,
    }


COMPONENT_GROUPS = {
    "tensor_engine": ["elementwise", "matmul"],
    "nn_layers": [
        "conv2d",
        "conv2d_bias",
        "max_pool",
        "avg_pool",
        "global_avg_pool",
        "batch_norm",
        "batch_norm_eval",
        "fully_connected",
        "softmax",
        "concat",
        "conv_relu_pool_fc",
    ],
    "se_block": ["se_forward", "se_parts"],
    "seid_blocks": [
        "inception_d",
        "inception_d_after",
        "inception_d_relu_conv",
        "inception_t",
        "inception_t_after",
        "dense_block",
        "stem",
    ],
    "training": ["joint_loss"],
}


def component_names() -> list:
    return list(_components()) + list(_block_components())


def run_component(name: str, step: float = 1e-5, tolerance: float = 1e-4, seed: int = 0) -> ComponentResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    start = time.perf_counter()
    simple = _components()
    if name in simple:
        fn, inputs = simple[name](rng)
        worst, checked, excluded = _check_all(fn, inputs, rng, step, tolerance)
    else:
        blocks = _block_components()
        if name not in blocks:
            raise KeyError(name)
        fn, x, ctx = blocks[name](rng)
        worst, checked, excluded = _block_check(fn, x, ctx, rng, step, tolerance)
    return ComponentResult(name, worst, worst <= tolerance, checked, excluded, time.perf_counter() - start)


def run_suite(
    components: Optional[Iterable[str]] = None, step: float = 1e-5, tolerance: float = 1e-4
) -> list:
    """Run the named components (or groups), defaulting to everything."""
    names = []
    for c in components or component_names():
        names.extend(COMPONENT_GROUPS.get(c, [c]))
    unknown = [n for n in names if n not in component_names()]
    if unknown:
        raise KeyError(f"unknown gradcheck components: {unknown}")
    return [run_component(n, step, tolerance) for n in names]
