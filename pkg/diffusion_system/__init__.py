"""
扩散表征系统 - 模块初始化文件

掩码扩散模型（MDM）与DDPM基线的自监督预训练：
- corruption: patch掩码与高斯前向扩散
- losses: SSIM / MSE / 像素交叉熵
- unet: 时间条件U-Net，可按解码块号取激活
- checkpoint: 检查点格式
- pretrainer: 预训练循环与重建预览
"""

from .corruption import (
    DiffusionSchedule,
    PatchGrid,
    PatchMask,
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
from .losses import SsimParams, cross_entropy, mse_loss, ssim, ssim_loss
from .unet import DecoderTap, UNetModel, build_unet, remap_block_indices, timestep_embedding
from .checkpoint import FORMAT_VERSION, load_checkpoint, load_model, save_checkpoint
from .pretrainer import DiffusionPretrainer, pretrain, reconstruct, sample_timesteps

__version__ = "1.0.0"
__description__ = "掩码扩散自监督预训练"

__all__ = [
    'DiffusionSchedule', 'PatchGrid', 'PatchMask',
    'patchify', 'unpatchify', 'mask_ratio', 'num_masked_patches', 'mask_image', 'mask_batch',
    'make_beta_schedule', 'diffuse', 'recover_x0',
    'SsimParams', 'ssim', 'ssim_loss', 'mse_loss', 'cross_entropy',
    'DecoderTap', 'UNetModel', 'build_unet', 'remap_block_indices', 'timestep_embedding',
    'FORMAT_VERSION', 'save_checkpoint', 'load_checkpoint', 'load_model',
    'DiffusionPretrainer', 'pretrain', 'reconstruct', 'sample_timesteps',
    'create_pretrainer',
]


def create_pretrainer(config, seed=None):
    """按 RunConfig 构建模型和预训练器的工厂函数"""
    seed = config.seed if seed is None else seed
    model = build_unet(config.unet, seed=seed, num_timesteps=config.diffusion.num_timesteps)
    return DiffusionPretrainer(model, config.diffusion, config.pretrain, seed=seed,
                               device=config.device, flip_prob=config.data.flip_prob)
