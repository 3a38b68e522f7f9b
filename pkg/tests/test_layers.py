import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seid.errors import ShapeError
from seid.layers import (
    BatchNormState,
    ConvSpec,
    PoolSpec,
    batch_norm,
    concat_channels,
    conv2d,
    conv_out_size,
    fully_connected,
    pool2d,
    slice_channels,
    softmax,
)
from seid.tensor import Tape, Tensor, grad_check, mul
from seid.tensor import sum as tsum


def brute_conv(x, w, stride, pad):
    """Direct nested-loop convolution, used as the oracle."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b, oc, i, j in itertools.product(range(n), range(o), range(ho), range(wo)):
        patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
        out[b, oc, i, j] = (patch * w[oc]).sum()
    return out


def brute_max_pool(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((n, c, ho, wo))
    for b, ch, i, j in itertools.product(range(n), range(c), range(ho), range(wo)):
        out[b, ch, i, j] = max(x[b, ch, i * s + di, j * s + dj] for di in range(k) for dj in range(k))
    return out


@pytest.mark.parametrize("size,kernel,stride,pad,expected", [(128, 3, 2, 0, 63), (63, 3, 2, 0, 31), (7, 7, 1, 0, 1), (31, 3, 2, 0, 15), (15, 3, 2, 0, 7)])
def test_conv_out_size_examples(size, kernel, stride, pad, expected):
    assert conv_out_size(size, kernel, stride, pad) == expected


def test_conv_out_size_kernel_too_large():
    with pytest.raises(ShapeError):
        conv_out_size(2, 3, 1, 0)


def test_stem_size_chain():
    sizes = [128]
    for k, s, p in [(3, 1, 1), (3, 1, 1), (3, 2, 0), (3, 1, 1), (3, 1, 1), (3, 2, 0)]:
        sizes.append(conv_out_size(sizes[-1], k, s, p))
    assert sizes == [128, 128, 128, 63, 63, 63, 31]


def test_identity_1x1_conv():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = conv2d(Tensor(x), ConvSpec(3, 3, 1), Tensor(w)).data
    np.testing.assert_array_equal(out, x)


def test_box_filter_interior():
    v = 1.75
    x = np.full((1, 1, 5, 5), v)
    out = conv2d(Tensor(x), ConvSpec(1, 1, 3, 1, 1), Tensor(np.ones((1, 1, 3, 3)))).data
    assert (out[0, 0, 1:-1, 1:-1] == 9 * v).all()
    assert out[0, 0, 0, 0] == 4 * v


def test_conv_matches_loop_oracle_and_gradients():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((5, 3, 3, 3))
    spec = ConvSpec(3, 5, 3, 2, 0)
    out = conv2d(Tensor(x), spec, Tensor(w)).data
    assert out.shape == (2, 5, 3, 3)
    np.testing.assert_allclose(out, brute_conv(x, w, 2, 0), rtol=1e-12, atol=1e-12)
    r = Tensor(rng.standard_normal(out.shape))
    assert grad_check(lambda t: tsum(mul(conv2d(t, spec, Tensor(w)), r)), x).passed
    assert grad_check(lambda t: tsum(mul(conv2d(Tensor(x), spec, t), r)), w).passed


def test_conv_bias_gradient():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    spec = ConvSpec(2, 3, 3, 1, 1, use_bias=True)
    res = grad_check(lambda b: tsum(conv2d(Tensor(x), spec, Tensor(w), b)), rng.standard_normal(3))
    assert res.passed


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), ConvSpec(3, 1, 1), Tensor(np.ones((1, 3, 1, 1))))


@settings(max_examples=20, deadline=None)
@given(
    size=st.integers(3, 7),
    kernel=st.integers(1, 3),
    stride=st.integers(1, 3),
    pad=st.integers(0, 1),
    seed=st.integers(0, 1000),
)
def test_conv_matches_oracle_property(size, kernel, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, size, size))
    w = rng.standard_normal((2, 2, kernel, kernel))
    out = conv2d(Tensor(x), ConvSpec(2, 2, kernel, stride, pad), Tensor(w)).data
    np.testing.assert_allclose(out, brute_conv(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_global_average_of_constant():
    out = pool2d(Tensor(np.full((1, 2, 3, 3), 4.5)), PoolSpec("global-average")).data
    assert out.shape == (1, 2, 1, 1) and (out == 4.5).all()


def test_max_pool_example_against_enumeration():
    x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
    out = pool2d(Tensor(x), PoolSpec("max", 3, 2, 0)).data
    # a 3x3 stride-2 window fits only once in 4x4; the 2x2 grid needs stride 1
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 11.0
    np.testing.assert_array_equal(out, brute_max_pool(x, 3, 2))
    out1 = pool2d(Tensor(x), PoolSpec("max", 3, 1, 0)).data
    np.testing.assert_array_equal(out1, brute_max_pool(x, 3, 1))
    assert out1[0, 0].tolist() == [[11.0, 12.0], [15.0, 16.0]]


def test_max_pool_tie_routes_to_first():
    x = np.ones((1, 1, 3, 3))
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        y = tsum(pool2d(t, PoolSpec("max", 3, 2, 0)))
    g = tape.backward(y)[t]
    assert g[0, 0, 0, 0] == 1.0 and g.sum() == 1.0


def test_average_pool_is_sum_over_area():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 7))
    out = pool2d(Tensor(x), PoolSpec("average", 3, 2, 0)).data
    sums = brute_conv(x.reshape(6, 1, 7, 7), np.ones((1, 1, 3, 3)), 2, 0).reshape(out.shape)
    np.testing.assert_allclose(out, sums / 9, rtol=1e-12)


@pytest.mark.parametrize("spec", [PoolSpec("max", 3, 2, 0), PoolSpec("average", 3, 2, 0), PoolSpec("average", 2, 1, 1), PoolSpec("global-average")])
def test_pool_gradients(spec):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 2, 7, 7))
    r = Tensor(rng.standard_normal(pool2d(Tensor(x), spec).shape))
    assert grad_check(lambda t: tsum(mul(pool2d(t, spec), r)), x).passed


def test_concat_order_single_and_mismatch():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    out = concat_channels([Tensor(a), Tensor(b)])
    assert out.shape == (1, 5, 3, 3)
    np.testing.assert_array_equal(out.data[:, :2], a)
    single = Tensor(a)
    assert concat_channels([single]) is single
    with pytest.raises(ShapeError):
        concat_channels([Tensor(a), Tensor(np.ones((1, 3, 2, 3)))])


@settings(max_examples=30, deadline=None)
@given(widths=st.lists(st.integers(1, 4), min_size=1, max_size=4), seed=st.integers(0, 1000))
def test_concat_then_slice_roundtrip(widths, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.standard_normal((2, c, 3, 3)) for c in widths]
    out = concat_channels([Tensor(p) for p in parts])
    start = 0
    for p in parts:
        back = slice_channels(out, start, start + p.shape[1]).data
        assert back.tobytes() == p.tobytes()
        start += p.shape[1]


def test_concat_gradient():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((1, 2, 3, 3))
    b = Tensor(rng.standard_normal((1, 1, 3, 3)))
    r = Tensor(rng.standard_normal((1, 3, 3, 3)))
    assert grad_check(lambda t: tsum(mul(concat_channels([t, b]), r)), a).passed


def test_batch_norm_statistics():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 3, 5, 5)) * 5 + 2
    out = batch_norm(Tensor(x), BatchNormState.fresh(3)).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-10
    # epsilon shrinks the variance to var / (var + eps); within 1e-6 once var >= 10
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_batch_norm_identity_and_zero_gamma():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((6, 2))
    x = (x - x.mean(0)) / x.std(0)
    out = batch_norm(Tensor(x), BatchNormState.fresh(2)).data
    np.testing.assert_allclose(out, x, atol=1e-4)
    st_ = BatchNormState.fresh(2)
    st_.gamma = Tensor(np.zeros(2))
    st_.beta = Tensor([0.5, -1.0])
    out = batch_norm(Tensor(x), st_).data
    assert (out == np.array([0.5, -1.0])).all()


def test_batch_norm_running_stats_and_eval_mode():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 2, 2, 2))
    state = BatchNormState.fresh(2)
    batch_norm(Tensor(x), state)
    m = x.shape[0] * 4
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    state.mode = "eval"
    one = batch_norm(Tensor(x[:1]), state).data
    both = batch_norm(Tensor(x), state).data
    np.testing.assert_array_equal(one[0], both[0])


def test_batch_norm_constant_channel_is_finite():
    out = batch_norm(Tensor(np.full((3, 1, 2, 2), 7.0)), BatchNormState.fresh(1)).data
    assert np.isfinite(out).all() and (out == 0).all()


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradients(mode):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 2, 3, 3))
    r = Tensor(rng.standard_normal(x.shape))

    def f(t):
        s = BatchNormState(Tensor([1.5, 0.5]), Tensor([0.1, -0.2]), np.array([0.3, -0.1]), np.array([2.0, 0.5]), mode=mode)
        return tsum(mul(batch_norm(t, s), r))

    assert grad_check(f, x).passed


def test_fully_connected_examples():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4))
    assert (fully_connected(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data == x).all()
    b = np.array([1.0, -2.0])
    out = fully_connected(Tensor(x), Tensor(np.zeros((4, 2))), Tensor(b)).data
    assert (out == b).all()
    w, bias = rng.standard_normal((4, 2)), rng.standard_normal(2)
    assert grad_check(lambda t: tsum(fully_connected(t, Tensor(w), Tensor(bias))), x).passed
    assert grad_check(lambda t: tsum(fully_connected(Tensor(x), t, Tensor(bias))), w).passed
    assert grad_check(lambda t: tsum(fully_connected(Tensor(x), Tensor(w), t)), bias).passed


def test_softmax_examples():
    out = softmax(Tensor([[0.0, math.log(3.0)]])).data
    np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-15)
    assert (softmax(Tensor(np.zeros((2, 4)))).data == 0.25).all()


@settings(max_examples=50, deadline=None)
@given(
    rows=st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=4),
    shift=st.floats(-50, 50),
)
def test_softmax_rows_and_shift_invariance(rows, shift):
    x = np.array(rows)
    p = softmax(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(Tensor(x + shift)).data, p, atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(12)
    r = Tensor(rng.standard_normal((2, 5)))
    assert grad_check(lambda t: tsum(mul(softmax(t), r)), rng.standard_normal((2, 5))).passed
