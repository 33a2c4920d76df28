import pytest
import torch

from causaltad.encoder import (
    CausalEncoder,
    EncoderConfig,
    HybridCausalBlock,
    InputEmbedding,
    pyramid_lengths,
)
from causaltad.errors import ConfigError, SequenceTooShort, ShapeError
from causaltad.gradcheck import check_component


def tiny_cfg(**kw):
    base = dict(
        levels=2, width=8, heads=2, ssm_state=2, ssm_expand=1.0,
        conv_width=2, channel_dropout_p=0.0, blocks_per_stage=1,
    )
    base.update(kw)
    return EncoderConfig(**base)


def identity_embedding(d, p):
    emb = InputEmbedding(d, d, dropout_p=p)
    with torch.no_grad():
        emb.fc1.weight.copy_(torch.eye(d))
        emb.fc1.bias.zero_()
        emb.fc2.weight.copy_(torch.eye(d))
        emb.fc2.bias.zero_()
    return emb


def test_dropout_disabled_matches_eval():
    emb = identity_embedding(6, p=0.0)
    x = torch.rand(2, 5, 6) + 0.1
    gen = torch.Generator().manual_seed(0)
    assert torch.equal(emb(x, training=True, generator=gen), emb(x, training=False))


def test_dropout_bypassed_in_eval():
    emb = identity_embedding(6, p=0.5)
    x = torch.rand(2, 5, 6) + 0.1
    assert torch.equal(emb(x, training=False), x)


def test_dropout_zeroes_expected_channel_fraction():
    d, trials = 8, 10_000
    emb = identity_embedding(d, p=0.5)
    x = torch.ones(trials, 1, d)
    gen = torch.Generator().manual_seed(123)
    out = emb(x, training=True, generator=gen)
    zero_fraction = float((out == 0).float().mean())
    assert abs(zero_fraction - 0.5) < 0.05
    # survivors are rescaled by 1 / (1 - p)
    surviving = out[out != 0]
    assert torch.allclose(surviving, torch.full_like(surviving, 2.0))


def test_dropout_whole_channels():
    emb = identity_embedding(4, p=0.5)
    x = torch.ones(3, 16, 4)
    gen = torch.Generator().manual_seed(7)
    out = emb(x, training=True, generator=gen)
    # a dropped channel is zero at every time step of its video
    per_channel = out.permute(0, 2, 1).reshape(-1, 16)
    for row in per_channel:
        assert torch.equal(row, torch.zeros(16)) or torch.equal(row, torch.full((16,), 2.0))


def test_residual_identity_when_fusion_zeroed():
    torch.manual_seed(1)
    block = HybridCausalBlock(tiny_cfg(levels=1))
    with torch.no_grad():
        block.fuse.weight.zero_()
        block.fuse.bias.zero_()
    x = torch.randn(1, 7, 8)
    assert torch.equal(block(x), x)


def test_global_receptive_field_unwindowed():
    torch.manual_seed(2)
    block = HybridCausalBlock(tiny_cfg(levels=1), dtype=torch.float64)
    with torch.no_grad():  # fusion starts at zero (identity block); fill it in
        block.fuse.weight.normal_(0.0, 0.3)
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(1, 9, 8, generator=gen, dtype=torch.float64)
    base = block(x)
    for j in (0, 4, 8):
        perturbed = x.clone()
        # single-channel bump; a uniform shift would vanish under layer norm
        perturbed[0, j, 1] += 1.0
        diff = (block(perturbed) - base).abs().amax(dim=-1)[0]
        assert (diff > 0).all(), f"perturbing {j} left some positions unchanged"


def test_ssm_ablated_block_equals_attention_only_path():
    torch.manual_seed(4)
    block = HybridCausalBlock(tiny_cfg(levels=1))
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(1, 6, 8, generator=gen)
    zeroed = HybridCausalBlock(tiny_cfg(levels=1))
    zeroed.load_state_dict(block.state_dict())
    with torch.no_grad():
        zeroed.fuse.weight[:, 8:].zero_()
    structural = HybridCausalBlock(tiny_cfg(levels=1))
    structural.load_state_dict(block.state_dict())
    structural.ssm = None
    assert torch.allclose(zeroed(x), structural(x), atol=1e-6)


def test_pyramid_length_arithmetic():
    assert pyramid_lengths(8, 4) == [8, 4, 2, 1]
    assert pyramid_lengths(9, 2) == [9, 5]
    assert pyramid_lengths(13, 1) == [13]
    import random

    rng = random.Random(0)
    for _ in range(50):
        t = rng.randint(1, 500)
        levels = rng.randint(1, 6)
        lens = pyramid_lengths(t, levels)
        assert len(lens) == levels and lens[0] == t
        for a, b in zip(lens, lens[1:]):
            assert b == -(-a // 2)


@pytest.mark.parametrize("downsample", ["conv", "maxpool"])
def test_encoder_level_shapes(downsample):
    torch.manual_seed(6)
    cfg = tiny_cfg(levels=3, downsample=downsample)
    enc = CausalEncoder(5, cfg)
    x = torch.randn(2, 21, 5)
    levels = enc(x)
    assert [lv.features.shape[1] for lv in levels] == pyramid_lengths(21, 3)
    assert [lv.stride for lv in levels] == [1, 2, 4]


def test_sequence_too_short():
    torch.manual_seed(7)
    enc = CausalEncoder(4, tiny_cfg(levels=4))
    with pytest.raises(SequenceTooShort):
        enc(torch.randn(1, 6, 4))


@pytest.mark.parametrize("downsample", ["conv", "maxpool"])
def test_padding_invariance_through_pyramid(downsample):
    torch.manual_seed(8)
    cfg = tiny_cfg(levels=3, downsample=downsample)
    enc = CausalEncoder(5, cfg)
    gen = torch.Generator().manual_seed(9)
    x = torch.randn(2, 24, 5, generator=gen)
    mask = torch.ones(2, 24, dtype=torch.bool)
    mask[1, 17:] = False
    base = enc(x, mask)
    garbled = x.clone()
    garbled[1, 17:] = 999.0
    out = enc(garbled, mask)
    for lv_base, lv_out in zip(base, out):
        valid = int(lv_base.mask[1].sum())
        assert torch.equal(lv_out.features[1, :valid], lv_base.features[1, :valid])
        assert torch.equal(lv_out.features[0], lv_base.features[0])


def test_padded_batch_matches_unpadded_run():
    torch.manual_seed(10)
    cfg = tiny_cfg(levels=2)
    enc = CausalEncoder(5, cfg)
    gen = torch.Generator().manual_seed(11)
    short = torch.randn(1, 13, 5, generator=gen)
    long = torch.randn(1, 20, 5, generator=gen)
    x = torch.zeros(2, 20, 5)
    x[0] = long[0]
    x[1, :13] = short[0]
    mask = torch.ones(2, 20, dtype=torch.bool)
    mask[1, 13:] = False
    batched = enc(x, mask)
    solo = enc(short)
    for lv_b, lv_s in zip(batched, solo):
        valid = int(lv_b.mask[1].sum())
        assert lv_s.features.shape[1] == valid
        assert torch.allclose(lv_b.features[1, :valid], lv_s.features[0], atol=1e-6)


def test_deterministic_forward():
    torch.manual_seed(12)
    enc = CausalEncoder(4, tiny_cfg())
    gen = torch.Generator().manual_seed(13)
    x = torch.randn(1, 10, 4, generator=gen)
    a = enc(x)
    b = enc(x)
    for lv_a, lv_b in zip(a, b):
        assert torch.equal(lv_a.features, lv_b.features)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(width=10, heads=3).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(channel_dropout_p=1.0).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(branch_mode="other").validate()
    with pytest.raises(ConfigError):
        EncoderConfig(downsample="stride").validate()


def test_block_shape_error():
    block = HybridCausalBlock(tiny_cfg(levels=1))
    with pytest.raises(ShapeError):
        block(torch.zeros(1, 4, 9))


def test_hybrid_block_gradients():
    report = check_component("hybrid_block", seed=0)
    assert report.passed, report.to_table()


def test_full_model_gradients():
    report = check_component("full_model", seed=0)
    assert report.passed, report.to_table()
