"""Tests for the spatial prior pyramid and injector/extractor blocks."""

import numpy as np
import pytest

from omtseg import adapter as ad
from omtseg import encoder as enc
from omtseg import tensor as T
from omtseg.errors import ConfigError


def rng_for(seed):
    return np.random.default_rng(seed)


def tiny_pyramid(rng, d=8):
    return ad.FeaturePyramid([
        (8, T.Tensor(rng.standard_normal((d, 2, 2)))),
        (16, T.Tensor(rng.standard_normal((d, 1, 2)))),
    ])


# ---------------------------------------------------------------------------
# Spatial prior
# ---------------------------------------------------------------------------

def test_spm_geometry_64():
    rng = rng_for(0)
    spm = ad.SpatialPrior(16, rng, stem_width=4)
    pyr = spm(T.Tensor(rng.random((3, 64, 64))))
    shapes = [(s, m.shape) for s, m in pyr.maps]
    assert shapes == [(8, (16, 8, 8)), (16, (16, 4, 4)), (32, (16, 2, 2))]
    assert pyr.total_tokens == 84
    assert pyr.flatten().shape == (84, 16)


def test_spm_zero_image_zero_bias_zero_pyramid():
    rng = rng_for(1)
    spm = ad.SpatialPrior(16, rng, stem_width=4)
    for _name, p in spm.named_parameters():
        if p.data.ndim == 1:  # all conv biases
            p.data[...] = 0.0
    pyr = spm(T.Tensor(np.zeros((3, 64, 64))))
    for _s, m in pyr.maps:
        assert np.all(m.data == 0.0)


def test_spm_matches_direct_conv_stack():
    rng = rng_for(2)
    spm = ad.SpatialPrior(16, rng, stem_width=4)
    img = T.Tensor(rng.random((3, 64, 64)))
    pyr = spm(img)

    x = T.gelu(spm.conv1(img))
    x = T.gelu(spm.conv2(x))
    x = T.gelu(spm.conv3(x))
    x = T.maxpool2d(x, 2, 2)
    s8 = T.gelu(spm.down8(x))
    s16 = T.gelu(spm.down16(s8))
    s32 = T.gelu(spm.down32(s16))
    np.testing.assert_array_equal(pyr.level(8).data, spm.proj8(s8).data)
    np.testing.assert_array_equal(pyr.level(16).data, spm.proj16(s16).data)
    np.testing.assert_array_equal(pyr.level(32).data, spm.proj32(s32).data)


def test_spm_rejects_bad_extent():
    rng = rng_for(3)
    spm = ad.SpatialPrior(8, rng, stem_width=4)
    with pytest.raises(ConfigError):
        spm(T.Tensor(np.zeros((3, 48, 64))))


def test_spm_impulse_response_is_local():
    # With zero biases a single bright pixel can only light up pyramid cells
    # within the stem's receptive field around it.
    rng = rng_for(4)
    spm = ad.SpatialPrior(8, rng, stem_width=4)
    for _name, p in spm.named_parameters():
        if p.data.ndim == 1:
            p.data[...] = 0.0
    img = np.zeros((3, 64, 64))
    img[:, 32, 32] = 5.0
    pyr = spm(T.Tensor(img))
    s8 = pyr.level(8).data
    nz_rows, nz_cols = np.nonzero(np.any(s8 != 0.0, axis=0))
    # Stride-8 cell containing the impulse is (4, 4); receptive radius is
    # well under 4 cells.
    assert np.all(np.abs(nz_rows - 4) <= 3)
    assert np.all(np.abs(nz_cols - 4) <= 3)
    assert nz_rows.size > 0


# ---------------------------------------------------------------------------
# Pyramid flatten / unflatten
# ---------------------------------------------------------------------------

def test_pyramid_flatten_round_trip_bit_exact():
    rng = rng_for(5)
    pyr = tiny_pyramid(rng)
    rebuilt = pyr.unflatten(pyr.flatten())
    for (s1, m1), (s2, m2) in zip(pyr.maps, rebuilt.maps):
        assert s1 == s2
        np.testing.assert_array_equal(m1.data, m2.data)


def test_pyramid_flatten_row_order():
    d = 3
    m8 = np.arange(d * 4).reshape(d, 2, 2).astype(float)
    pyr = ad.FeaturePyramid([(8, T.Tensor(m8))])
    flat = pyr.flatten().data
    # Token (r, c) is row r*2+c holding the channel vector at that cell.
    for r in range(2):
        for c in range(2):
            np.testing.assert_array_equal(flat[r * 2 + c], m8[:, r, c])


def test_scale_rows_assign_per_level():
    rng = rng_for(6)
    pyr = tiny_pyramid(rng, d=4)
    table = T.Tensor(rng.standard_normal((3, 4)))
    rows = pyr.scale_rows(table).data
    np.testing.assert_array_equal(rows[:4], np.tile(table.data[0], (4, 1)))
    np.testing.assert_array_equal(rows[4:], np.tile(table.data[1], (2, 1)))


# ---------------------------------------------------------------------------
# Injector
# ---------------------------------------------------------------------------

def test_injector_zero_projection_is_identity():
    rng = rng_for(7)
    inj = ad.SpatialInjector(8, 2, rng)
    inj.attn.w_out.zero_()
    pyr = tiny_pyramid(rng)
    scale = T.Tensor(np.zeros((3, 8)))
    x = T.Tensor(rng.standard_normal((5, 8)))
    out = inj(x, pyr, scale).data
    np.testing.assert_array_equal(out, x.data)


def test_injector_single_token_pyramid_adds_projected_value():
    rng = rng_for(8)
    inj = ad.SpatialInjector(8, 2, rng)
    token = rng.standard_normal((8, 1, 1))
    pyr = ad.FeaturePyramid([(8, T.Tensor(token))])
    scale = T.Tensor(np.zeros((3, 8)))
    x = T.Tensor(rng.standard_normal((4, 8)))
    out = inj(x, pyr, scale).data
    kv = T.Tensor(token.reshape(8, 1).T)
    projected = inj.attn.w_out(inj.attn.w_v(kv)).data[0]
    np.testing.assert_allclose(out, x.data + projected, atol=1e-12)


def test_injector_gradient_check():
    rng = rng_for(9)
    inj = ad.SpatialInjector(8, 2, rng)
    pyr = tiny_pyramid(rng)
    for _s, m in pyr.maps:
        m.requires_grad = True
    scale = T.Tensor(rng.standard_normal((3, 8)) * 0.1, requires_grad=True)
    x = T.Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    w = rng.standard_normal((4, 8))

    def loss():
        return T.sum_(T.mul(inj(x, pyr, scale), T.Tensor(w)))

    params = (
        [("x", x), ("scale", scale)]
        + [(f"level{s}", m) for s, m in pyr.maps]
        + inj.named_parameters()
    )
    report = T.finite_difference_check(loss, params, tolerance=5e-6)
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# Extractor
# ---------------------------------------------------------------------------

def test_extractor_zero_paths_keep_pyramid():
    rng = rng_for(10)
    ext = ad.MultiScaleExtractor(8, 2, 16, rng)
    ext.attn.w_out.zero_()
    ext.ffn.lin1.zero_()
    ext.ffn.lin2.zero_()
    pyr = tiny_pyramid(rng)
    scale = T.Tensor(rng.standard_normal((3, 8)))
    backbone = T.Tensor(rng.standard_normal((5, 8)))
    out = ext(pyr, backbone, scale)
    for (s1, m1), (s2, m2) in zip(pyr.maps, out.maps):
        assert s1 == s2
        np.testing.assert_array_equal(m1.data, m2.data)


def test_extractor_preserves_shapes():
    rng = rng_for(11)
    ext = ad.MultiScaleExtractor(8, 2, 16, rng)
    pyr = tiny_pyramid(rng)
    out = ext(pyr, T.Tensor(rng.standard_normal((6, 8))),
              T.Tensor(rng.standard_normal((3, 8))))
    assert [(s, m.shape) for s, m in out.maps] == \
        [(s, m.shape) for s, m in pyr.maps]


def test_extractor_gradient_check():
    rng = rng_for(12)
    ext = ad.MultiScaleExtractor(8, 2, 16, rng)
    pyr = tiny_pyramid(rng)
    for _s, m in pyr.maps:
        m.requires_grad = True
    scale = T.Tensor(rng.standard_normal((3, 8)) * 0.1, requires_grad=True)
    backbone = T.Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    w = rng.standard_normal((6, 8))

    def loss():
        out = ext(pyr, backbone, scale)
        return T.sum_(T.mul(out.flatten(), T.Tensor(w)))

    params = (
        [("backbone", backbone), ("scale", scale)]
        + [(f"level{s}", m) for s, m in pyr.maps]
        + ext.named_parameters()
    )
    report = T.finite_difference_check(
        loss, params, mode="sampled", samples=5, tolerance=5e-6,
        rng=np.random.default_rng(7),
    )
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# Full adapter + encoder interaction
# ---------------------------------------------------------------------------

def build_pair(rng, schedule=None):
    cfg = enc.EncoderConfig(
        n_layers=4, model_dim=16, head_count=2, patch_size=16,
        image_h=64, image_w=64, ffn_hidden=32,
    )
    fe = enc.FusionEncoder(cfg, rng)
    va = ad.VisualAdapter(16, 2, 4, 32, rng, schedule=schedule, stem_width=4)
    return cfg, fe, va


def test_default_schedule_even_spacing():
    assert ad.default_schedule(4) == [1, 2, 3, 4]
    assert ad.default_schedule(12) == [3, 6, 9, 12]
    assert ad.default_schedule(2) == [1, 2]


def test_schedule_validation():
    rng = rng_for(13)
    with pytest.raises(ConfigError):
        ad.VisualAdapter(16, 2, 4, 32, rng, schedule=[0, 2])
    with pytest.raises(ConfigError):
        ad.VisualAdapter(16, 2, 4, 32, rng, schedule=[1, 5])
    with pytest.raises(ConfigError):
        ad.VisualAdapter(16, 2, 4, 32, rng, schedule=[2, 2])


def test_empty_schedule_matches_plain_encoder():
    rng = rng_for(14)
    _cfg, fe, va = build_pair(rng, schedule=[])
    img = T.Tensor(rng.random((3, 64, 64)))
    txt = T.Tensor(rng.standard_normal((4, 16)))
    hook, pyramid_out = va.begin(img)
    hooked = fe(img, txt, [(1, 0)], adapter_hook=hook)
    plain = fe(img, txt, [(1, 0)])
    np.testing.assert_array_equal(hooked.f_v.data, plain.f_v.data)
    np.testing.assert_array_equal(
        hooked.text_tokens.data, plain.text_tokens.data
    )
    spm_pyr = va.spm(img)
    for (s1, m1), (s2, m2) in zip(pyramid_out().maps, spm_pyr.maps):
        assert s1 == s2
        np.testing.assert_array_equal(m1.data, m2.data)


def test_zeroed_projections_match_disabled_adapter():
    rng = rng_for(15)
    _cfg, fe, va = build_pair(rng)
    va.zero_output_projections()
    img = T.Tensor(rng.random((3, 64, 64)))
    txt = T.Tensor(rng.standard_normal((4, 16)))
    hook, pyramid_out = va.begin(img)
    hooked = fe(img, txt, [(1, 0)], adapter_hook=hook)
    plain = fe(img, txt, [(1, 0)])
    np.testing.assert_array_equal(hooked.f_v.data, plain.f_v.data)
    spm_pyr = va.spm(img)
    for (s1, m1), (s2, m2) in zip(pyramid_out().maps, spm_pyr.maps):
        np.testing.assert_array_equal(m1.data, m2.data)


def test_adapter_changes_encoder_output_when_active():
    rng = rng_for(16)
    _cfg, fe, va = build_pair(rng)
    img = T.Tensor(rng.random((3, 64, 64)))
    txt = T.Tensor(rng.standard_normal((4, 16)))
    hook, _ = va.begin(img)
    hooked = fe(img, txt, [(1, 0)], adapter_hook=hook)
    plain = fe(img, txt, [(1, 0)])
    assert np.any(hooked.f_v.data != plain.f_v.data)


def test_no_dead_adapter_parameters():
    rng = rng_for(17)
    _cfg, fe, va = build_pair(rng)
    img = T.Tensor(rng.random((3, 64, 64)))
    txt = T.Tensor(rng.standard_normal((4, 16)))
    with T.Tape() as tape:
        hook, pyramid_out = va.begin(img)
        trace = fe(img, txt, [(1, 0)], adapter_hook=hook)
        pyr_flat = pyramid_out().flatten()
        loss = T.add(
            T.sum_(T.mul(trace.f_v, trace.f_v)),
            T.sum_(T.mul(pyr_flat, pyr_flat)),
        )
        grads = tape.backward(loss)
    for name, p in va.named_parameters():
        g = grads.grad(p)
        assert np.any(g != 0.0), f"parameter {name} received zero gradient"
