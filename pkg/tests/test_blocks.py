import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seid.blocks import (
    DenseBlockState,
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
    normalize_placement,
    stem_forward,
    transition_out_size,
)
from seid.errors import ShapeError
from seid.gradcheck import _block_check, _randomize
from seid.layers import conv_out_size
from seid.tensor import Tensor


def d_layer(cin, k, placement="before", r=2, seed=0, composite="bn-relu-conv", training=False):
    cfg = InceptionDConfig(k, placement, r)
    b = ParamBuilder(composite)
    declare_inception_d(b, "d", cin, cfg)
    return cfg, build_context(b, seed, training)


def t_layer(cin, placement="before", r=2, seed=0, training=False):
    cfg = InceptionTConfig(cin, placement, r)
    b = ParamBuilder()
    declare_inception_t(b, "t", cfg)
    return cfg, build_context(b, seed, training)


def test_placement_aliases():
    assert normalize_placement("before-inception") == "before"
    assert normalize_placement("after-inception") == "after"
    with pytest.raises(ShapeError):
        normalize_placement("sideways")


def test_inception_d_table1_widths():
    # k=48, first layer of block 1 sees 2k = 96 channels
    cfg = InceptionDConfig(48, "before", 4)
    b = ParamBuilder()
    declare_inception_d(b, "d", 96, cfg)
    shapes = {n: d.shape for n, d in b.decls.items()}
    assert shapes["d.a.weight"] == (48, 96, 1, 1)
    assert shapes["d.b_reduce.weight"] == (192, 96, 1, 1)
    assert shapes["d.b_conv.weight"] == (48, 192, 3, 3)
    assert shapes["d.c_reduce.weight"] == (192, 96, 1, 1)
    assert shapes["d.c_conv1.weight"] == (48, 192, 3, 3)
    assert shapes["d.c_conv2.weight"] == (48, 48, 3, 3)
    assert shapes["d.merge.weight"] == (48, 144, 1, 1)
    assert shapes["d.se.w1"] == (24, 96)


def test_inception_d_output_shape():
    cfg, ctx = d_layer(8, 4)
    x = np.random.default_rng(0).standard_normal((2, 8, 6, 6))
    assert inception_d_forward(Tensor(x), cfg, ctx, "d").shape == (2, 4, 6, 6)


def test_inception_d_rejects_wrong_width():
    cfg, ctx = d_layer(8, 4)
    with pytest.raises(ShapeError):
        inception_d_forward(Tensor(np.ones((1, 6, 4, 4))), cfg, ctx, "d")


@pytest.mark.parametrize("placement", ["before", "after"])
def test_inception_d_bypass_matches_plain_layer(placement):
    x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 5, 5)))
    cfg, ctx = d_layer(8, 4, placement)
    ctx.se_bypass = True
    plain_cfg, plain_ctx = d_layer(8, 4, "none")
    a = inception_d_forward(x, cfg, ctx, "d").data
    b = inception_d_forward(x, plain_cfg, plain_ctx, "d").data
    assert a.tobytes() == b.tobytes()


def test_inception_d_gradcheck_single_sample():
    # 1 x 8 x 6 x 6 input, k=4, r=2, train-mode batch norm
    rng = np.random.default_rng(2)
    cfg, ctx = d_layer(8, 4, training=True, seed=5)
    ctx = _randomize(ctx, rng)
    fn = lambda x, c: inception_d_forward(x, cfg, c, "d")  # noqa: E731
    worst, checked, _ = _block_check(fn, rng.standard_normal((1, 8, 6, 6)), ctx, rng, 1e-5, 1e-4)
    assert worst <= 1e-4 and checked > 1000


def test_dense_block_state_ledger():
    s = DenseBlockState(3, 96, 48)
    assert s.layer_input_channels(3) == 192
    assert s.out_channels == 240


@pytest.mark.parametrize("k0_mult,layers,out_mult", [(2, 3, 5), (2.75, 5, 7.75)])
def test_dense_block_table1_channels(k0_mult, layers, out_mult):
    k = 16
    cfg = InceptionDConfig(k, "before", 4)
    assert declare_dense_block(ParamBuilder(), "b", int(k0_mult * k), layers, cfg) == int(out_mult * k)


def test_dense_block_forward_keeps_input_prefix():
    k, k0 = 2, 3
    cfg = InceptionDConfig(k, "before", 2)
    b = ParamBuilder()
    declare_dense_block(b, "blk", k0, 3, cfg)
    ctx = build_context(b, 0)
    x = np.random.default_rng(3).standard_normal((1, k0, 4, 4))
    out = dense_block_forward(Tensor(x), 3, cfg, ctx, "blk").data
    assert out.shape == (1, k0 + 3 * k, 4, 4)
    assert out[:, :k0].tobytes() == x.tobytes()


def test_empty_dense_block_is_identity():
    x = Tensor(np.ones((1, 3, 4, 4)))
    ctx = build_context(ParamBuilder(), 0)
    assert dense_block_forward(x, 0, InceptionDConfig(2), ctx, "blk") is x


@pytest.mark.parametrize("size,expected", [(31, 15), (15, 7), (7, 3), (3, 1)])
def test_transition_sizes(size, expected):
    assert transition_out_size(size) == expected


def test_inception_t_shapes_and_odd_channels():
    for cin, size in [(10, 7), (11, 8), (5, 3)]:
        cfg, ctx = t_layer(cin)
        x = Tensor(np.random.default_rng(cin).standard_normal((1, cin, size, size)))
        out = inception_t_forward(x, cfg, ctx, "t")
        assert out.shape == (1, cin // 2, conv_out_size(size, 3, 2, 0), conv_out_size(size, 3, 2, 0))


def test_inception_t_table1_widths():
    k = 16
    assert InceptionTConfig(5 * k).out_channels == int(2.5 * k)
    assert InceptionTConfig(int(5.5 * k)).out_channels == int(2.75 * k)


def test_inception_t_too_small():
    cfg, ctx = t_layer(4)
    with pytest.raises(ShapeError):
        inception_t_forward(Tensor(np.ones((1, 4, 2, 2))), cfg, ctx, "t")


def test_inception_t_bypass_matches_plain_layer():
    x = Tensor(np.random.default_rng(4).standard_normal((2, 6, 7, 7)))
    cfg, ctx = t_layer(6)
    ctx.se_bypass = True
    plain_cfg, plain_ctx = t_layer(6, "none")
    assert inception_t_forward(x, cfg, ctx, "t").data.tobytes() == inception_t_forward(x, plain_cfg, plain_ctx, "t").data.tobytes()


@pytest.mark.parametrize("k", [16, 48])
def test_stem_output(k):
    b = ParamBuilder()
    declare_stem(b, k)
    ctx = build_context(b, 0)
    out = stem_forward(Tensor(np.zeros((1, 3, 128, 128))), k, ctx, expected_size=128)
    assert out.shape == (1, 2 * k, 31, 31)
    # zero image: every pixel of a channel sees the same (padding-free) interior value
    assert np.unique(out.data[0, :, 5:-5, 5:-5].reshape(2 * k, -1), axis=1).shape[1] == 1


def test_stem_wrong_size():
    b = ParamBuilder()
    declare_stem(b, 2)
    with pytest.raises(ShapeError):
        stem_forward(Tensor(np.zeros((1, 3, 20, 20))), 2, build_context(b, 0), expected_size=32)


@settings(max_examples=30, deadline=None)
@given(
    k=st.integers(1, 4),
    k0=st.integers(1, 6),
    layers=st.integers(0, 3),
    size=st.integers(3, 6),
    placement=st.sampled_from(["before", "after", "none"]),
    r=st.integers(1, 4),
)
def test_growth_and_halving_property(k, k0, layers, size, placement, r):
    cfg = InceptionDConfig(k, placement, r)
    b = ParamBuilder()
    out_c = declare_dense_block(b, "blk", k0, layers, cfg)
    tcfg = InceptionTConfig(out_c, placement, r) if out_c >= 2 else None
    if tcfg:
        declare_inception_t(b, "t", tcfg)
    ctx = build_context(b, 0)
    x = Tensor(np.random.default_rng(0).standard_normal((1, k0, size, size)))
    h = dense_block_forward(x, layers, cfg, ctx, "blk")
    assert h.shape == (1, k0 + layers * k, size, size)
    if tcfg:
        t = inception_t_forward(h, tcfg, ctx, "t")
        assert t.shape == (1, out_c // 2, transition_out_size(size), transition_out_size(size))
