"""
退化过程测试：patch 掩码与高斯前向扩散
"""

import pytest
import torch
from scipy import stats

from diffusion_system import corruption
from diffusion_system.corruption import (
    PatchGrid,
    diffuse,
    make_beta_schedule,
    mask_batch,
    mask_image,
    mask_ratio,
    num_masked_patches,
    patchify,
    recover_x0,
    unpatchify,
)
from errors import DimensionError, NumericalDomainError, TimestepRangeError
from utils import make_generator

from conftest import create_mock_image

T = 20
P = 4


@pytest.mark.parametrize("t, expected", [(0, 0), (1, 0), (2, 1), (10, 7), (20, 15)])
def test_num_masked_patches_floor(t, expected):
    # N=16, T=20: ⌊16t/21⌋
    assert num_masked_patches(t, T, 16) == expected


def test_mask_ratio_never_reaches_one():
    assert mask_ratio(0, T) == 0.0
    assert mask_ratio(T, T) == pytest.approx(T / (T + 1))
    with pytest.raises(TimestepRangeError):
        mask_ratio(T + 1, T)


def test_mask_image_only_touches_masked_patches(mock_image):
    masked, mask = mask_image(mock_image, 12, T, P, make_generator(3), mask_value=0.0)
    grid = PatchGrid(16, 16, P)
    assert mask.num_masked == num_masked_patches(12, T, grid.num_patches)

    pixel_flags = mask.flags.reshape(grid.rows, grid.cols)
    pixel_flags = pixel_flags.repeat_interleave(P, 0).repeat_interleave(P, 1)
    assert torch.equal(masked[:, ~pixel_flags], mock_image[:, ~pixel_flags])
    assert bool((masked[:, pixel_flags] == 0.0).all())


def test_mask_image_t0_is_identity(mock_image):
    masked, mask = mask_image(mock_image, 0, T, P, make_generator(0))
    assert mask.num_masked == 0
    assert torch.equal(masked, mock_image)


def test_mask_image_deterministic_for_same_generator_seed(mock_image):
    a, _ = mask_image(mock_image, 9, T, P, make_generator(7))
    b, _ = mask_image(mock_image, 9, T, P, make_generator(7))
    assert torch.equal(a, b)


def test_random_stream_position_independent_of_t(mock_image):
    g0, g1 = make_generator(5), make_generator(5)
    mask_image(mock_image, 0, T, P, g0)
    mask_image(mock_image, T, T, P, g1)
    assert torch.equal(torch.rand(4, generator=g0), torch.rand(4, generator=g1))


def test_masks_are_nested_across_t_for_same_seed(mock_image):
    previous = None
    for t in range(0, T + 1, 4):
        _, mask = mask_image(mock_image, t, T, P, make_generator(11))
        if previous is not None:
            assert bool((previous & ~mask.flags).sum() == 0)
        previous = mask.flags


def test_masked_patch_selection_is_uniform():
    """每个 patch 被遮挡的频率应一致（卡方检验）"""
    image = torch.zeros(1, 16, 16)
    generator = make_generator(0)
    counts = torch.zeros(16)
    draws = 1200
    for _ in range(draws):
        _, mask = mask_image(image, 10, T, P, generator)
        counts += mask.flags.float()
    _, p_value = stats.chisquare(counts.numpy())
    assert p_value > 0.001


def test_mask_batch_uses_per_image_t():
    images = torch.stack([create_mock_image(seed=i) for i in range(3)])
    t = torch.tensor([0, 10, 20])
    _, flags = mask_batch(images, t, T, P, make_generator(1))
    assert flags.sum(dim=1).tolist() == [num_masked_patches(int(v), T, 16) for v in t]


def test_mask_requires_divisible_patch(mock_image):
    with pytest.raises(DimensionError):
        mask_image(mock_image, 5, T, 5, make_generator(0))


def test_patchify_layout_and_inverse(mock_image):
    patches = patchify(mock_image, P)
    assert patches.shape == (16, P * P * 3)
    # 第二个 patch 是第一行第二列
    assert torch.equal(patches[1].reshape(P, P, 3).permute(2, 0, 1), mock_image[:, :P, P:2 * P])
    assert torch.equal(unpatchify(patches, 16, 16, P), mock_image)


def test_beta_schedule_linear_float64():
    schedule = make_beta_schedule(1000)
    assert schedule.betas.dtype == torch.float64
    assert schedule.betas[0].item() == pytest.approx(1e-4)
    assert schedule.betas[-1].item() == pytest.approx(2e-2)
    assert bool((schedule.alpha_bars[1:] < schedule.alpha_bars[:-1]).all())
    assert schedule.alpha_bar(1).item() == pytest.approx(1 - 1e-4)


def test_diffuse_closed_form_with_injected_noise(mock_image, tiny_schedule):
    noise = create_mock_image(seed=9)
    noisy, eps = diffuse(mock_image, 7, tiny_schedule, noise=noise)
    alpha_bar = tiny_schedule.alpha_bar(7).float()
    expected = alpha_bar.sqrt() * mock_image + (1 - alpha_bar).sqrt() * noise
    assert torch.allclose(noisy, expected, atol=1e-6)
    assert torch.equal(eps, noise)


def test_recover_x0_inverts_diffuse(mock_image, tiny_schedule):
    noisy, eps = diffuse(mock_image, 15, tiny_schedule, generator=make_generator(2))
    assert torch.allclose(recover_x0(noisy, eps, 15, tiny_schedule), mock_image, atol=1e-4)


def test_diffuse_batch_with_per_image_t(tiny_schedule):
    images = torch.stack([create_mock_image(seed=i) for i in range(2)])
    noise = torch.zeros_like(images)
    noisy, _ = diffuse(images, torch.tensor([1, 20]), tiny_schedule, noise=noise)
    for i, t in enumerate([1, 20]):
        assert torch.allclose(noisy[i], tiny_schedule.alpha_bar(t).float().sqrt() * images[i], atol=1e-6)


def test_recover_x0_rejects_tiny_alpha_bar(mock_image, tiny_schedule):
    with pytest.raises(NumericalDomainError):
        recover_x0(mock_image, mock_image, T, tiny_schedule, min_alpha_bar=0.99)


@pytest.mark.parametrize("t", [0, T + 1])
def test_diffuse_timestep_range(mock_image, tiny_schedule, t):
    with pytest.raises(TimestepRangeError):
        diffuse(mock_image, t, tiny_schedule, generator=make_generator(0))


def test_check_timesteps_rejects_float():
    with pytest.raises(TimestepRangeError):
        corruption.check_timesteps(torch.tensor([1.5]), 0, T)
