import dataclasses

import numpy as np
import pytest

from dgcwnet import baselines, dgcw
from dgcwnet import tensor as T
from dgcwnet.dgcw import DgcwParams
from dgcwnet.exceptions import ShapeError
from dgcwnet.tensor import Tensor

RNG = np.random.default_rng(11)
FMAP = RNG.normal(size=(2, 4, 6, 6))


@pytest.mark.parametrize("norm_kind", dgcw.NORM_KINDS)
def test_dgcw_operator_matches_naive(norm_kind):
    p = DgcwParams.init(
        4, 0, norm_kind=norm_kind, downsample_ratio=2, zero_init_g2=False
    )
    direct = dgcw.dgcw_forward(Tensor(FMAP), p, "naive")
    skeleton = baselines.dgcw_as_context_operator(Tensor(FMAP), p)
    assert np.array_equal(direct.data, skeleton.data)


@pytest.mark.parametrize("ratio", [1, 2])
def test_nonlocal_operator_matches_module(ratio):
    p = baselines.NonLocalParams.init(4, 0, downsample_ratio=ratio)
    module = baselines.nonlocal_context(Tensor(FMAP), p)
    skeleton = baselines.nonlocal_operator(p)(Tensor(FMAP))
    np.testing.assert_allclose(skeleton.data, module.data, rtol=1e-12, atol=1e-12)


def test_attention_rows_sum_to_one():
    q = Tensor(RNG.normal(size=(1, 5, 3)))
    k = Tensor(RNG.normal(size=(1, 5, 3)))
    attn = baselines.attention_weights(q, k)
    assert attn.shape == (1, 5, 5)
    np.testing.assert_allclose(attn.data.sum(axis=2), 1.0)


def test_conv_context_starts_as_identity():
    p = baselines.ConvContextParams.init(4, 0, downsample_ratio=2)
    out = baselines.conv_context(Tensor(FMAP), p)
    assert np.array_equal(out.data, FMAP)


def test_conv_context_scales_by_pixel_count():
    p = baselines.ConvContextParams.init(
        4, 0, downsample_ratio=3, zero_init_g2=False
    )
    out = baselines.conv_context(Tensor(FMAP), p)
    d = FMAP.reshape(2, 4, 2, 3, 2, 3).mean(axis=(3, 5)).reshape(2, 4, 4)
    v = np.einsum("oc,ncp->nop", p.wv.weight.data, d)
    hidden = np.maximum(np.einsum("oc,ncp->nop", p.g1.weight.data, v), 0.0)
    update = 4.0 * np.einsum("oc,ncp->nop", p.g2.weight.data, hidden)
    # corner pixels copy the corner cells of the 2×2 grid
    np.testing.assert_allclose(out.data[:, :, 0, 0], FMAP[:, :, 0, 0] + update[..., 0])
    np.testing.assert_allclose(
        out.data[:, :, 5, 5], FMAP[:, :, 5, 5] + update[..., 3]
    )


def test_gap_context_adds_a_constant_per_channel():
    p = baselines.GapParams.init(4, 0)
    delta = baselines.gap_context(Tensor(FMAP), p).data - FMAP
    np.testing.assert_allclose(delta, delta[:, :, :1, :1] * np.ones((1, 1, 6, 6)))
    pooled = FMAP.mean(axis=(2, 3))
    expected = pooled @ p.proj.weight.data.T + p.proj.bias.data
    np.testing.assert_allclose(delta[:, :, 0, 0], expected)


def test_se_context_gates_between_zero_and_input():
    positive = np.abs(FMAP) + 0.1
    p = baselines.SeParams.init(4, 0, reduction=2)
    assert p.fc1.out_channels == 2
    out = baselines.se_context(Tensor(positive), p).data
    assert np.all(out > 0)
    assert np.all(out < positive)


@pytest.mark.parametrize(
    "forward,params",
    [
        (baselines.conv_context, baselines.ConvContextParams.init(4, 0)),
        (baselines.gap_context, baselines.GapParams.init(4, 0)),
        (baselines.se_context, baselines.SeParams.init(4, 0)),
        (baselines.nonlocal_context, baselines.NonLocalParams.init(4, 0)),
    ],
)
def test_shapes_and_channel_checks(forward, params):
    assert forward(Tensor(FMAP), params).shape == FMAP.shape
    with pytest.raises(ShapeError):
        forward(Tensor(np.ones((1, 3, 6, 6))), params)


def test_downsampled_modules_reject_small_extents():
    p = baselines.NonLocalParams.init(4, 0, downsample_ratio=8)
    with pytest.raises(ShapeError):
        baselines.nonlocal_context(Tensor(FMAP), p)
    with pytest.raises(ShapeError):
        baselines.nonlocal_operator(p)(Tensor(FMAP))


def test_nonlocal_gradcheck():
    p = baselines.NonLocalParams.init(4, 0, downsample_ratio=2)
    w = Tensor(RNG.normal(size=(1, 4, 4, 4)))

    def f(t):
        return T.reduce("sum", baselines.nonlocal_context(t, p) * w, (0, 1, 2, 3))

    assert T.gradcheck(f, Tensor(RNG.normal(size=(1, 4, 4, 4)))) < 1e-6


def test_se_with_zero_weights_halves_the_input():
    p = baselines.SeParams.init(4, 0, reduction=2)
    for name, t, _ in list(p.named_parameters()):
        if name.endswith("weight"):
            p.set_tensor(name, Tensor(np.zeros(t.shape), requires_grad=True))
    out = baselines.se_context(Tensor(FMAP), p)
    assert np.array_equal(out.data, 0.5 * FMAP)


def nonlocal_constant_update(p, pixel):
    v = p.value.weight.data @ pixel + p.value.bias.data
    return p.out.weight.data @ v + p.out.bias.data


def test_nonlocal_single_pixel():
    p = baselines.NonLocalParams.init(4, 0)
    f = RNG.normal(size=(1, 4, 1, 1))
    out = baselines.nonlocal_context(Tensor(f), p)
    expected = f[0, :, 0, 0] + nonlocal_constant_update(p, f[0, :, 0, 0])
    np.testing.assert_allclose(out.data[0, :, 0, 0], expected, rtol=1e-12)


def test_nonlocal_uniform_pixels():
    p = baselines.NonLocalParams.init(4, 0)
    pixel = RNG.normal(size=4)
    f = np.broadcast_to(pixel[None, :, None, None], (2, 4, 3, 5))
    out = baselines.nonlocal_context(Tensor(f), p)
    expected = pixel + nonlocal_constant_update(p, pixel)
    np.testing.assert_allclose(
        out.data, np.broadcast_to(expected[None, :, None, None], f.shape), rtol=1e-12
    )


def test_conv_context_is_dgcw_with_unit_weights():
    p = DgcwParams.init(4, 0, downsample_ratio=2, zero_init_g2=False)
    conv = baselines.ConvContextParams(
        wv=p.wv, g1=p.g1, g2=p.g2, downsample_ratio=p.downsample_ratio
    )

    def unit_pairs(q, k):
        n, pixels, c = q.shape
        return Tensor(np.ones((n, c, pixels, pixels)))

    op = dataclasses.replace(baselines.dgcw_operator(p), f=unit_pairs)
    np.testing.assert_allclose(
        op(Tensor(FMAP)).data,
        baselines.conv_context(Tensor(FMAP), conv).data,
        rtol=1e-12,
        atol=1e-12,
    )
