import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcac import tensor as T
from dcac.errors import ShapeError
from dcac.layers import (AADS, BLUR_KERNEL, AadsParams, ConvBlock, DCACBlock, DcacModuleParams,
                         aads_forward, condenser_branch_forward, dcac_forward,
                         init_condenser_branch, mid_channels)
from dcac.tensor import Tensor


def make_params(c, seed=0):
    rng = np.random.default_rng(seed)
    return DcacModuleParams(init_condenser_branch(c, 1, rng=rng), init_condenser_branch(c, 2, rng=rng))


def shift_discrepancy(fn, x):
    """Mean |f(x) - f(shift(x))| where the shift is one pixel right, cropped to the overlap."""
    a = fn(Tensor(x)).data
    b = fn(Tensor(np.roll(x, 1, axis=3))).data
    return float(np.abs(a[..., 1:-1] - b[..., 1:-1]).mean())


def test_branch_layer_counts():
    p = make_params(8)
    assert len(p.branch_a.embed_layers) == 1
    assert len(p.branch_b.embed_layers) == 2


def test_reduction_picks_mid_channels():
    assert mid_channels(32) == 8
    assert mid_channels(3) == 1
    assert init_condenser_branch(16, 2).mid_channels == 4


def test_branch_projection_has_input_shape():
    p = make_params(8)
    v = Tensor(np.random.default_rng(0).normal(size=(2, 8, 6, 10)))
    assert condenser_branch_forward(v, p.branch_a).shape == v.shape
    assert condenser_branch_forward(v, p.branch_b).shape == v.shape


def test_branch_rejects_odd_input_and_says_how_to_fix():
    with pytest.raises(ShapeError, match="pad") as exc:
        condenser_branch_forward(Tensor(np.zeros((1, 4, 5, 6))), make_params(4).branch_a)
    assert exc.value.dim == "height"


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.sampled_from([4, 8]), st.integers(2, 9), st.integers(2, 9),
       st.integers(0, 10**6))
def test_gate_keeps_shape_and_sign_and_shrinks(n, c, h, w, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, c, h, w))
    out = dcac_forward(Tensor(v), make_params(c, seed), pad_odd=True).data
    assert out.shape == v.shape
    assert np.all(np.abs(out) <= np.abs(v))
    assert np.all(out * v >= 0)


def test_gate_is_exactly_v_times_sigmoid_of_branch_sum():
    p = make_params(4, 3)
    v = Tensor(np.random.default_rng(3).normal(size=(1, 4, 6, 6)))
    pa = condenser_branch_forward(v, p.branch_a).data
    pb = condenser_branch_forward(v, p.branch_b).data
    expected = v.data / (1.0 + np.exp(-(pa + pb)))
    np.testing.assert_allclose(dcac_forward(v, p).data, expected, rtol=1e-14)


def test_gate_on_zero_input_is_zero():
    out = dcac_forward(Tensor(np.zeros((1, 8, 4, 4))), make_params(8))
    np.testing.assert_array_equal(out.data, 0.0)


def test_branch_channel_mismatch():
    with pytest.raises(ShapeError) as exc:
        dcac_forward(Tensor(np.zeros((1, 4, 4, 4))), make_params(8))
    assert exc.value.dim == "channels"


def test_block_parameters_named_by_branch():
    names = [n for n, _ in DCACBlock(8).named_parameters()]
    assert names[0] == "a.embed0.depthwise"
    assert "b.embed1.pointwise" in names
    assert names[-1] == "b.expansion_bias"


def test_aads_halves_spatial_size():
    out = aads_forward(Tensor(np.zeros((1, 3, 7, 8))))
    assert out.shape == (1, 3, 4, 4)


def test_aads_preserves_constants():
    out = aads_forward(Tensor(np.full((1, 2, 6, 6), 0.7)))
    np.testing.assert_allclose(out.data, 0.7, rtol=1e-15)


def test_aads_kernel_is_normalized_binomial():
    assert BLUR_KERNEL.sum() == 1.0
    np.testing.assert_array_equal(BLUR_KERNEL * 16, np.outer([1, 2, 1], [1, 2, 1]))


def test_aads_kernel_is_buffer_not_parameter():
    m = AADS(4)
    assert list(m.named_parameters()) == []
    assert [n for n, _ in m.named_buffers()] == ["kernel"]


def test_aads_kernel_shape_checked():
    with pytest.raises(ShapeError):
        aads_forward(Tensor(np.zeros((1, 3, 4, 4))), AadsParams.for_channels(2))


def test_aads_is_more_shift_stable_than_strided_maxpool():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 4, 16, 16))
    assert shift_discrepancy(aads_forward, x) < shift_discrepancy(lambda t: T.maxpool2d(t, 2, 2), x)


def test_conv_block_frozen_norm_uses_running_stats():
    block = ConvBlock(3, 4)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
    before = block.norm.running_mean.data.copy()
    block.norm.frozen = True
    block(x)
    np.testing.assert_array_equal(block.norm.running_mean.data, before)
    block.norm.frozen = False
    block(x)
    assert not np.array_equal(block.norm.running_mean.data, before)


def test_module_footprint_params_match_enumeration():
    for module, shape in ((ConvBlock(3, 8, stride=2), (1, 3, 9, 9)), (DCACBlock(8), (1, 8, 7, 7))):
        rows, _ = module.footprint(shape)
        assert sum(r.params for r in rows) == sum(p.size for p in module.parameters())
