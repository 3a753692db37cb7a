"""
U-Net 结构测试：前向形状、解码块激活、结构表、块号映射
"""

import pytest
import torch

from config import UNetParams
from diffusion_system.unet import build_unet, remap_block_indices, timestep_embedding
from errors import ConfigError, DimensionError, TimestepRangeError

from conftest import TINY_T, create_mock_image, tiny_unet_params


def test_timestep_embedding_layout():
    emb = timestep_embedding(torch.tensor([0, 5]), 8)
    assert emb.shape == (2, 8)
    # t=0: sin 部分全 0，cos 部分全 1
    assert torch.allclose(emb[0, :4], torch.zeros(4))
    assert torch.allclose(emb[0, 4:], torch.ones(4))
    # 第一个频率为 1
    assert emb[1, 0].item() == pytest.approx(torch.sin(torch.tensor(5.0)).item(), abs=1e-6)


def test_timestep_embedding_rejects_odd_dim():
    with pytest.raises(ConfigError):
        timestep_embedding(3, 7)


@pytest.mark.parametrize("t", [1, TINY_T // 2, TINY_T])
def test_forward_preserves_shape(tiny_model, t):
    x = torch.stack([create_mock_image(seed=i) for i in range(2)])
    with torch.no_grad():
        assert tiny_model(x, t).shape == x.shape


def test_architecture_table_matches_activations(tiny_model):
    table = tiny_model.architecture_table
    assert len(table) == tiny_model.num_decoder_blocks == 4
    x = create_mock_image()[None]
    with torch.no_grad():
        _, activations = tiny_model.forward_with_activations(x, 3, range(4))
    for tap in table:
        act = activations[tap.block_index]
        assert act.shape[1] == tap.channels
        assert act.shape[-1] == tap.resolution


def test_activations_do_not_change_prediction(tiny_model):
    x = create_mock_image()[None]
    with torch.no_grad():
        plain = tiny_model(x, 4)
        tapped, _ = tiny_model.forward_with_activations(x, 4, [0, 3])
    assert torch.equal(plain, tapped)


def test_every_parameter_gets_gradient(tiny_params):
    model = build_unet(tiny_params, seed=0, num_timesteps=TINY_T).train()
    x = torch.stack([create_mock_image(seed=i) for i in range(2)])
    loss = (model(x, torch.tensor([1, 7])) - x).pow(2).mean()
    loss.backward()
    missing = [name for name, p in model.named_parameters()
               if p.grad is None or not bool(p.grad.abs().sum() > 0)]
    assert missing == []


def test_build_unet_is_seeded(tiny_params):
    a = build_unet(tiny_params, seed=3)
    b = build_unet(tiny_params, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_input_shape_and_timestep_checks(tiny_model):
    with pytest.raises(DimensionError):
        tiny_model(torch.zeros(1, 3, 8, 8), 1)
    with pytest.raises(TimestepRangeError):
        tiny_model(torch.zeros(1, 3, 16, 16), TINY_T + 1)
    with pytest.raises(TimestepRangeError):
        tiny_model.forward_with_activations(torch.zeros(1, 3, 16, 16), 1, [4])


def test_validate_taps_sorts_and_dedups(tiny_model):
    assert tiny_model.validate_taps([3, 1, 3]) == [1, 3]


def test_desk_and_reference_block_counts():
    assert UNetParams.desk().num_decoder_blocks == 9
    assert UNetParams.reference().num_decoder_blocks == 18


@pytest.mark.slow
def test_desk_unet_builds_and_runs():
    model = build_unet(UNetParams.desk(), num_timesteps=100).eval()
    assert model.num_decoder_blocks == 9
    with torch.no_grad():
        assert model(torch.zeros(1, 3, 64, 64), 50).shape == (1, 3, 64, 64)


def test_remap_block_indices():
    assert remap_block_indices([8, 9, 10, 11, 12], 9, 18) == [4, 5, 6]
    assert remap_block_indices([0, 17], 9) == [0, 8]
    assert remap_block_indices([5, 5, 2], 18) == [2, 5]
    with pytest.raises(TimestepRangeError):
        remap_block_indices([18], 9)


def test_incompatible_channel_layout():
    with pytest.raises(ConfigError):
        build_unet(tiny_unet_params(image_size=17))


@pytest.mark.parametrize("num_timesteps", [TINY_T, 1000])
def test_timestep_embedding_pairwise_distinct(num_timesteps):
    emb = timestep_embedding(torch.arange(1, num_timesteps + 1), 128).double()
    dist = torch.cdist(emb, emb)
    dist.fill_diagonal_(float("inf"))
    assert dist.min().item() > 1e-6


def test_attention_at_missing_resolution_rejected():
    params = UNetParams(image_size=16, channel_mult=[1, 2], attention_resolutions=[32])
    with pytest.raises(ConfigError, match=r"\[32\].*\[8, 16\]"):
        build_unet(params, seed=0, num_timesteps=100)


def test_desk_attention_resolutions_are_produced():
    params = UNetParams.desk()
    available = {params.image_size // 2 ** level for level in range(len(params.channel_mult))}
    assert set(params.attention_resolutions) <= available
