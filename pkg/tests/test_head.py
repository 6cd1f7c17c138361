"""Tests for the query decoder head and pixel embedding map."""

import numpy as np
import pytest

from omtseg import adapter as ad
from omtseg import head as hd
from omtseg import tensor as T
from omtseg.errors import ContractError


def rng_for(seed):
    return np.random.default_rng(seed)


def full_pyramid(rng, d=8, h8=2, w8=2):
    return ad.FeaturePyramid([
        (8, T.Tensor(rng.standard_normal((d, h8, w8)))),
        (16, T.Tensor(rng.standard_normal((d, max(1, h8 // 2), max(1, w8 // 2))))),
        (32, T.Tensor(rng.standard_normal((d, 1, 1)))),
    ])


def make_head(rng, d=8, heads=2, hidden=16, q=2, layers=2, text_cross_attn=True):
    return hd.SegmentationHead(
        d, heads, hidden, q, layers, rng, text_cross_attn=text_cross_attn
    )


# ---------------------------------------------------------------------------
# Pixel decoder
# ---------------------------------------------------------------------------

def test_pixel_decoder_constant_input_identity_convs():
    rng = rng_for(0)
    d = 4
    pd = hd.PixelDecoder(d, rng)
    for lat in (pd.lateral8, pd.lateral16, pd.lateral32):
        lat.weight.data[...] = np.eye(d)
        lat.bias.data[...] = 0.0
    pd.out_kernel.data[...] = 0.0
    for c in range(d):
        pd.out_kernel.data[c, c, 1, 1] = 1.0
    pd.out_bias.data[...] = 0.0
    v = np.arange(1.0, d + 1.0)
    pyr = ad.FeaturePyramid([
        (8, T.Tensor(np.tile(v[:, None, None], (1, 4, 4)))),
        (16, T.Tensor(np.tile(v[:, None, None], (1, 2, 2)))),
        (32, T.Tensor(np.tile(v[:, None, None], (1, 1, 1)))),
    ])
    out = pd(pyr).data
    assert out.shape == (d, 8, 8)
    expected = 3.0 * v  # lateral + two top-down additions of the same constant
    for c in range(d):
        np.testing.assert_allclose(out[c], expected[c], atol=1e-12)


def test_pixel_decoder_output_extent():
    rng = rng_for(1)
    pd = hd.PixelDecoder(8, rng)
    pyr = full_pyramid(rng, d=8, h8=4, w8=6)
    out = pd(pyr)
    assert out.shape == (8, 8, 12)


def test_pixel_decoder_missing_level():
    rng = rng_for(2)
    pd = hd.PixelDecoder(8, rng)
    pyr = ad.FeaturePyramid([(8, T.Tensor(rng.standard_normal((8, 2, 2))))])
    with pytest.raises(ContractError):
        pd(pyr)


def test_pixel_decoder_gradient_check():
    rng = rng_for(3)
    pd = hd.PixelDecoder(4, rng)
    pyr = full_pyramid(rng, d=4)
    for _s, m in pyr.maps:
        m.requires_grad = True
    w = rng.standard_normal((4, 4, 4))

    def loss():
        return T.sum_(T.mul(pd(pyr), T.Tensor(w)))

    params = [(f"level{s}", m) for s, m in pyr.maps] + pd.named_parameters()
    report = T.finite_difference_check(
        loss, params, mode="sampled", samples=6, tolerance=5e-6,
        rng=np.random.default_rng(4),
    )
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# Mask-derived attention
# ---------------------------------------------------------------------------

def test_mask_to_attention_thresholds_per_level():
    rng = rng_for(4)
    pyr = full_pyramid(rng, d=4, h8=2, w8=2)
    logits = np.full((2, 4, 4), -8.0)
    logits[0, :2, :2] = 8.0  # query 0 confident in the top-left quadrant
    mask = hd.mask_to_attention(logits, pyr)
    assert mask.shape == (2, 4 + 1 + 1)
    # Stride-8 grid is 2x2: only cell (0, 0) overlaps the confident quadrant.
    assert mask[0, :4].tolist() == [True, False, False, False]
    # Query 1 admits nothing anywhere -> full-attention fallback.
    assert mask[1].all()


def test_all_negative_mask_equals_unmasked_layer():
    rng = rng_for(5)
    layer = hd.DecoderLayer(8, 2, 16, rng)
    pyr = full_pyramid(rng)
    seq = pyr.flatten()
    x = T.Tensor(rng.standard_normal((3, 8)))
    pos = T.Tensor(rng.standard_normal((3, 8)) * 0.1)
    f_l = T.Tensor(rng.standard_normal((2, 8)))
    fallback_mask = hd.mask_to_attention(np.full((3, 4, 4), -9.0), pyr)
    masked = layer(x, pos, seq, f_l, fallback_mask).data
    unmasked = layer(x, pos, seq, f_l, None).data
    np.testing.assert_array_equal(masked, unmasked)


def test_decoder_weights_zero_outside_region():
    rng = rng_for(6)
    layer = hd.DecoderLayer(8, 2, 16, rng)
    pyr = full_pyramid(rng)
    seq = pyr.flatten()
    x = T.Tensor(rng.standard_normal((2, 8)))
    pos = T.Tensor(rng.standard_normal((2, 8)) * 0.1)
    logits = rng.standard_normal((2, 4, 4)) * 6.0
    mask = hd.mask_to_attention(logits, pyr)
    _, weights = layer(x, pos, seq, None, mask, return_weights=True)
    assert weights.shape[1:] == (2, 6)
    assert np.all(weights[:, ~mask] == 0.0)


# ---------------------------------------------------------------------------
# Full head
# ---------------------------------------------------------------------------

def test_head_single_query_single_layer():
    rng = rng_for(7)
    head = make_head(rng, q=1, layers=1)
    pyr = full_pyramid(rng)
    f_l = T.Tensor(rng.standard_normal((2, 8)))
    out = head(pyr, f_l)
    assert out.mask_logits.shape == (1, 4, 4)
    assert out.mask_features.shape == (1, 8)
    assert out.objectness.shape == (1,)
    assert len(out.layers) == 1


def test_head_auxiliary_count_matches_depth():
    rng = rng_for(8)
    head = make_head(rng, q=3, layers=4)
    pyr = full_pyramid(rng)
    out = head(pyr, T.Tensor(rng.standard_normal((2, 8))))
    assert len(out.layers) == 4
    assert out.layers[-1].mask_logits is out.mask_logits


def test_head_mask_equals_feature_pixel_dot():
    rng = rng_for(9)
    head = make_head(rng, q=2, layers=1)
    pyr = full_pyramid(rng)
    out = head(pyr, T.Tensor(rng.standard_normal((2, 8))))
    pix = head.pixel_decoder(pyr).data
    want = np.einsum("qd,dhw->qhw", out.mask_features.data, pix)
    np.testing.assert_allclose(out.mask_logits.data, want, atol=1e-12)


def test_head_query_permutation_equivariance():
    rng = rng_for(10)
    head = make_head(rng, q=4, layers=2)
    pyr = full_pyramid(rng)
    f_l = T.Tensor(rng.standard_normal((3, 8)))
    base = head(pyr, f_l)
    perm = np.array([2, 0, 3, 1])
    head.query_embed.data[...] = head.query_embed.data[perm]
    head.query_pos.data[...] = head.query_pos.data[perm]
    permuted = head(pyr, f_l)
    np.testing.assert_allclose(
        permuted.mask_logits.data, base.mask_logits.data[perm], atol=1e-9
    )
    np.testing.assert_allclose(
        permuted.objectness.data, base.objectness.data[perm], atol=1e-9
    )
    np.testing.assert_allclose(
        permuted.mask_features.data, base.mask_features.data[perm], atol=1e-9
    )


def test_disabled_text_attention_ignores_prompt():
    rng = rng_for(11)
    head = make_head(rng, text_cross_attn=False)
    pyr = full_pyramid(rng)
    out1 = head(pyr, T.Tensor(rng.standard_normal((3, 8))))
    out2 = head(pyr, T.Tensor(rng.standard_normal((5, 8))))
    np.testing.assert_array_equal(out1.mask_logits.data, out2.mask_logits.data)
    np.testing.assert_array_equal(out1.objectness.data, out2.objectness.data)


def test_enabled_text_attention_uses_prompt():
    rng = rng_for(12)
    head = make_head(rng, text_cross_attn=True)
    pyr = full_pyramid(rng)
    f1 = T.Tensor(rng.standard_normal((3, 8)))
    f2 = T.Tensor(f1.data + 0.5)
    out1 = head(pyr, f1)
    out2 = head(pyr, f2)
    assert np.any(out1.mask_logits.data != out2.mask_logits.data)


def test_prompt_order_invariance_of_masks():
    # Attention pools over the category set, so reordering F_L rows cannot
    # change any query output.
    rng = rng_for(13)
    head = make_head(rng, text_cross_attn=True)
    pyr = full_pyramid(rng)
    f_l = rng.standard_normal((3, 8))
    out1 = head(pyr, T.Tensor(f_l))
    out2 = head(pyr, T.Tensor(f_l[[2, 0, 1]]))
    np.testing.assert_allclose(
        out1.mask_logits.data, out2.mask_logits.data, atol=1e-12
    )


def test_head_gradient_check():
    rng = rng_for(14)
    head = make_head(rng, d=8, heads=2, hidden=16, q=2, layers=2)
    pyr = full_pyramid(rng)
    for _s, m in pyr.maps:
        m.requires_grad = True
    f_l = T.Tensor(rng.standard_normal((2, 8)), requires_grad=True)
    w_m = rng.standard_normal((2, 4, 4))
    w_o = rng.standard_normal(2)

    def loss():
        out = head(pyr, f_l)
        total = T.sum_(T.mul(out.mask_logits, T.Tensor(w_m)))
        total = T.add(total, T.sum_(T.mul(out.objectness, T.Tensor(w_o))))
        return total

    params = (
        [("f_l", f_l)]
        + [(f"level{s}", m) for s, m in pyr.maps]
        + head.named_parameters()
    )
    report = T.finite_difference_check(
        loss, params, mode="sampled", samples=4, tolerance=1e-3,
        rng=np.random.default_rng(15),
    )
    assert report.passed, report.summary()
