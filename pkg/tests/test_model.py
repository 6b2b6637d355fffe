import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pert.errors import ConfigError, DimensionError, InputValidationError
from pert.model import (
    PERT,
    Backbone,
    BackgroundReconstructionHead,
    ModelConfig,
    TextLocalizationHead,
    parameter_count,
    region_compose,
)


def small_cfg(**kw):
    base = dict(base_channels=8, num_residual_blocks=2, input_size=(32, 32), psp_bin_sizes=(1, 2, 4))
    base.update(kw)
    return ModelConfig(**base)


# --- backbone ---------------------------------------------------------------


@pytest.mark.parametrize("size,expected", [(64, 16), (128, 32)])
def test_backbone_quarter_resolution(size, expected):
    bb = Backbone(6, 16, 5)
    feats, skips = bb(torch.rand(1, 6, size, size))
    assert feats.shape == (1, 16, expected, expected)
    assert [s.shape[-1] for s in skips] == [size, size // 2, size // 4]


def test_backbone_rejects_indivisible_shape():
    with pytest.raises(DimensionError):
        Backbone(6, 8, 1)(torch.rand(1, 6, 30, 32))


def test_non_finite_input_rejected():
    model = PERT(small_cfg())
    x = torch.rand(1, 3, 32, 32)
    x[0, 0, 3, 3] = float("nan")
    with pytest.raises(InputValidationError):
        model(x)


# --- text localization head -------------------------------------------------


def test_tln_range_and_size():
    head = TextLocalizationHead(16, (1, 2, 3, 6))
    mask = head(torch.randn(2, 16, 16, 16) * 5, (64, 64))
    assert mask.shape == (2, 1, 64, 64)
    assert mask.min() >= 0 and mask.max() <= 1


def _const_conv(conv, v):
    w = conv.weight.detach().double().numpy()
    return w.sum(axis=(2, 3)) @ v + conv.bias.detach().double().numpy()


def test_tln_zero_features_give_uniform_mask_matching_constant_oracle():
    torch.manual_seed(3)
    head = TextLocalizationHead(16, (1, 2, 3, 6)).double()
    with torch.no_grad():
        mask = head(torch.zeros(1, 16, 16, 16, dtype=torch.float64), (64, 64))
    relu = lambda v: np.maximum(v, 0)
    # a conv with reflect padding maps a constant map to W.sum(kh, kw) @ v + b
    a0 = relu(_const_conv(head.down, np.zeros(16)))
    branches = [relu(_const_conv(stage[1], a0)) for stage in head.psp.stages]
    v1 = np.concatenate([a0, *branches])
    v2 = relu(_const_conv(head.fuse, v1))
    v3 = relu(_const_conv(head.refine, np.concatenate([v2, np.zeros(16)])))
    expected = 1 / (1 + np.exp(-_const_conv(head.logits, v3)[0]))
    m = mask.numpy()
    assert np.ptp(m) < 1e-12
    np.testing.assert_allclose(m, expected, rtol=0, atol=1e-12)


# --- background reconstruction head ------------------------------------------


def test_brn_mrm_only_in_training():
    bb, brn = Backbone(6, 16, 2), BackgroundReconstructionHead(16)
    feats, skips = bb(torch.rand(1, 6, 64, 64))
    recon, p1, p2 = brn(feats, skips, training=False)
    assert recon.shape == (1, 3, 64, 64) and p1 is None and p2 is None
    recon, p1, p2 = brn(feats, skips, training=True)
    assert p1.shape == (1, 3, 32, 32) and p2.shape == (1, 3, 16, 16)
    for t in (recon, p1, p2):
        assert t.min() >= 0 and t.max() <= 1


def test_fresh_brn_reproduces_previous_output():
    bb, brn = Backbone(6, 16, 2), BackgroundReconstructionHead(16)
    x = torch.rand(1, 6, 32, 32) * 0.99 + 0.005
    recon, p1, p2 = brn(*bb(x), training=True)
    assert torch.allclose(recon, x[:, 3:6], atol=1e-6)
    assert p1.shape == (1, 3, 16, 16) and p2.shape == (1, 3, 8, 8)


def test_brn_mismatched_skips():
    bb, brn = Backbone(6, 16, 2), BackgroundReconstructionHead(16)
    feats, skips = bb(torch.rand(1, 6, 64, 64))
    skips[1] = skips[1][..., :-2, :-2]
    with pytest.raises(DimensionError):
        brn(feats, skips)


# --- compositing --------------------------------------------------------------


def test_region_compose_examples():
    x = torch.rand(2, 3, 8, 8)
    y = torch.rand(2, 3, 8, 8)
    assert torch.equal(region_compose(torch.zeros(2, 1, 8, 8), y, x), x)
    assert torch.equal(region_compose(torch.ones(2, 1, 8, 8), y, x), y)
    half = region_compose(torch.full((1, 1, 4, 4), 0.5), torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4))
    assert torch.equal(half, torch.full((1, 3, 4, 4), 0.5))


def test_region_compose_shape_mismatch():
    with pytest.raises(DimensionError):
        region_compose(torch.zeros(1, 1, 8, 8), torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 4, 4))
    with pytest.raises(DimensionError):
        region_compose(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_region_compose_convex(seed):
    g = torch.Generator().manual_seed(seed)
    m, y, x = (torch.rand(s, generator=g) for s in ((1, 1, 6, 6), (1, 3, 6, 6), (1, 3, 6, 6)))
    out = region_compose(m, y, x)
    lo, hi = torch.minimum(x, y), torch.maximum(x, y)
    assert bool(((out >= lo - 1e-7) & (out <= hi + 1e-7)).all())


# --- erase ---------------------------------------------------------------------


def test_erase_returns_T_stages_with_input_shape():
    model = PERT(small_cfg(num_stages=3)).eval()
    x = torch.rand(2, 3, 32, 32)
    outs = model(x)
    assert len(outs) == 3
    assert [o.stage_index for o in outs] == [1, 2, 3]
    for o in outs:
        assert o.composited.shape == x.shape
        assert o.p1 is None and o.p2 is None


def test_training_mode_produces_composited_mrm_outputs():
    model = PERT(small_cfg()).train()
    outs = model(torch.rand(1, 3, 32, 32))
    assert outs[-1].p1.shape == (1, 3, 16, 16)
    assert outs[-1].p2.shape == (1, 3, 8, 8)


def test_forced_zero_mask_returns_original():
    model = PERT(small_cfg(num_stages=3)).eval()
    with torch.no_grad():
        model.block.tln.logits.weight.zero_()
        model.block.tln.logits.bias.fill_(-1e4)
    x = torch.rand(2, 3, 32, 32)
    for o in model(x):
        assert torch.equal(o.composited, x)


def test_region_ms_off_outputs_raw_reconstruction():
    model = PERT(small_cfg(region_ms=False)).train()
    for o in model(torch.rand(1, 3, 32, 32)):
        assert torch.equal(o.composited, o.raw_reconstruction)
        assert torch.equal(o.p1, o.raw_p1)


def test_stages_reuse_one_block():
    model = PERT(small_cfg(num_stages=3))
    calls = []
    model.block.register_forward_hook(lambda mod, inp, out: calls.append(id(mod)))
    model(torch.rand(1, 3, 32, 32))
    assert len(calls) == 3 and len(set(calls)) == 1


def test_stage_inputs_chain_previous_output():
    model = PERT(small_cfg(num_stages=3)).eval()
    inputs = []
    model.block.register_forward_pre_hook(lambda mod, args: inputs.append(args[0].clone()))
    x = torch.rand(1, 3, 32, 32)
    outs = model(x)
    assert torch.equal(inputs[0], torch.cat([x, x], 1))
    for t in (1, 2):
        assert torch.equal(inputs[t], torch.cat([x, outs[t - 1].composited], 1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_binary_mask_preserves_non_text_pixels(seed):
    g = torch.Generator().manual_seed(seed)
    model = PERT(small_cfg(num_stages=3, seed=seed % 1000)).eval()
    x = torch.rand(1, 3, 32, 32, generator=g)
    mask = (torch.rand(1, 1, 32, 32, generator=g) > 0.5).float()
    outs = model(x, mask_override=mask)
    keep = (mask == 0).expand_as(x)
    for o in outs:
        assert torch.equal(o.composited[keep], x[keep])


def test_binarize_preserves_unmasked_pixels():
    model = PERT(small_cfg()).eval()
    x = torch.rand(1, 3, 32, 32)
    outs = model(x, binarize=0.5)
    for o in outs:
        assert set(o.mask.unique().tolist()) <= {0.0, 1.0}
        keep = (o.mask == 0).expand_as(x)
        assert torch.equal(o.composited[keep], x[keep])


def test_determinism_same_seed():
    x = torch.rand(1, 3, 32, 32)
    a = PERT(small_cfg(seed=7)).eval()(x)[-1].composited
    b = PERT(small_cfg(seed=7)).eval()(x)[-1].composited
    c = PERT(small_cfg(seed=8)).eval()(x)[-1].composited
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_indivisible_input_rejected():
    with pytest.raises(DimensionError):
        PERT(small_cfg())(torch.rand(1, 3, 36, 36))


# --- config / parameter count --------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        dict(num_stages=0),
        dict(input_size=(30, 32)),
        dict(psp_bin_sizes=(1, 3, 2)),
        dict(psp_bin_sizes=(1, 2, 16)),
        dict(mrm_scales=(0.5, 0.5)),
    ],
)
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        small_cfg(**kw)


def test_parameter_count_independent_of_T():
    counts = {parameter_count(ModelConfig(num_stages=t)) for t in (1, 2, 3, 5)}
    assert len(counts) == 1


def test_parameter_count_monotone_in_width():
    a = parameter_count(ModelConfig(base_channels=16))
    b = parameter_count(ModelConfig(base_channels=32))
    assert 0 < a < b


def test_config_json_round_trip():
    cfg = ModelConfig(base_channels=16, num_stages=2, seed=9)
    assert ModelConfig.from_json(cfg.to_json()) == cfg
