"""
像素级特征提取

冻结的预训练U-Net按自身的退化方式处理输入（MDM 遮挡 / DDPM 加噪，t=0 为干净输入），
取指定解码块的激活，上采样到输入尺寸后按块号升序拼接成 (C_f, H, W) 特征。
MDM 提取时的遮挡随机流由 (种子, 图像, t) 派生，重复提取结果一致。
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from loguru import logger

from config import FeatureParams
from diffusion_system import corruption
from diffusion_system.checkpoint import checkpoint_sha256, load_model
from diffusion_system.corruption import DiffusionSchedule
from diffusion_system.unet import UNetModel, remap_block_indices
from errors import ConfigError, DimensionError
from utils import derive_seed, make_generator

METHODS = ("mdm", "ddpm")


@dataclass
class FeatureStack:
    """(C_f, H, W) 特征及其来源"""
    data: torch.Tensor
    checkpoint_id: str
    timesteps: Tuple[int, ...]
    blocks: Tuple[int, ...]
    channels_per_block: Dict[int, int] = field(default_factory=dict)

    @property
    def num_channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    def pixels(self) -> torch.Tensor:
        """(H·W, C_f)，按行优先排列像素"""
        return self.data.reshape(self.num_channels, -1).T

    def provenance(self) -> Dict[str, Any]:
        return {
            "checkpoint_id": self.checkpoint_id,
            "timesteps": list(self.timesteps),
            "blocks": list(self.blocks),
        }


def image_key(image: torch.Tensor) -> str:
    """未给出图像编号时用像素内容的哈希作为键"""
    return hashlib.sha256(image.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


def checkpoint_method(payload: Dict[str, Any]) -> str:
    """从检查点元数据读取预训练方法"""
    method = (payload.get("metadata") or {}).get("method")
    if method is None:
        state = payload.get("training_state") or {}
        method = (state.get("pretrain_params") or {}).get("method", "mdm")
    if method not in METHODS:
        raise ConfigError(f"检查点中的预训练方法未知: {method}")
    return method


class FeatureExtractor:
    """持有冻结模型与退化设置的特征提取器"""

    def __init__(self, model: UNetModel, schedule: DiffusionSchedule, method: str = "mdm",
                 patch_size: int = 8, mask_value: float = 0.0, checkpoint_id: str = "",
                 upsample_mode: str = "bilinear", clean_input: bool = False, seed: int = 0):
        if method not in METHODS:
            raise ConfigError(f"未知的预训练方法: {method}")
        if upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"未知的上采样方式: {upsample_mode}")
        self.model = model.eval()
        self.schedule = schedule
        self.method = method
        self.patch_size = patch_size
        self.mask_value = mask_value
        self.checkpoint_id = checkpoint_id
        self.upsample_mode = upsample_mode
        self.clean_input = clean_input
        self.seed = seed

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], params: Optional[FeatureParams] = None,
                        seed: int = 0, device: str = "cpu") -> "FeatureExtractor":
        params = params or FeatureParams()
        model, diffusion, schedule, payload = load_model(path, map_location=device)
        extractor = cls(
            model.to(device), schedule, method=checkpoint_method(payload),
            patch_size=diffusion.patch_size, mask_value=diffusion.mask_value,
            checkpoint_id=checkpoint_sha256(path), upsample_mode=params.upsample_mode,
            clean_input=params.clean_input, seed=seed,
        )
        logger.info(f"特征提取器已加载 {path} (method={extractor.method}, "
                    f"解码块 {model.num_decoder_blocks})")
        return extractor

    @property
    def num_timesteps(self) -> int:
        return self.schedule.num_timesteps

    @property
    def device(self) -> torch.device:
        return next(self.model.parameters()).device

    def resolve_blocks(self, blocks: Iterable[int], reference_count: Optional[int] = None) -> List[int]:
        """按 reference_count 编号的块号映射到本模型；reference_count 为空时视为本模型编号"""
        if reference_count is None or reference_count == self.model.num_decoder_blocks:
            return self.model.validate_taps(blocks)
        return remap_block_indices(blocks, self.model.num_decoder_blocks, reference_count)

    def channels_for(self, blocks: Iterable[int]) -> int:
        table = self.model.architecture_table
        return sum(table[b].channels for b in self.model.validate_taps(blocks))

    def corrupt(self, image: torch.Tensor, t: int, key: str) -> torch.Tensor:
        """按模型原生的退化方式处理单张图像 (C,H,W)"""
        corruption.check_timesteps(t, 0, self.num_timesteps)
        if t == 0 or self.clean_input:
            return image
        generator = make_generator(derive_seed(self.seed, key, t))
        if self.method == "mdm":
            masked, _ = corruption.mask_image(image, t, self.num_timesteps, self.patch_size,
                                              generator, self.mask_value)
            return masked
        noisy, _ = corruption.diffuse(image, t, self.schedule, generator=generator)
        return noisy

    @torch.no_grad()
    def extract(self, image: torch.Tensor, t: int, blocks: Iterable[int],
                image_id: Optional[str] = None) -> FeatureStack:
        if image.dim() != 3:
            raise DimensionError(f"需要单张图像 (C,H,W)，得到 {tuple(image.shape)}")
        taps = self.model.validate_taps(blocks)
        if not taps:
            raise ConfigError("至少需要一个解码块")
        t = int(t)
        key = image_id if image_id is not None else image_key(image)
        x = self.corrupt(image.detach().cpu().float(), t, key)

        _, activations = self.model.forward_with_activations(x[None].to(self.device), t, taps)
        height, width = image.shape[-2:]
        parts, channels = [], {}
        for block in taps:
            act = activations[block]
            if act.shape[-2:] != (height, width):
                kwargs = {"align_corners": False} if self.upsample_mode == "bilinear" else {}
                act = F.interpolate(act, size=(height, width), mode=self.upsample_mode, **kwargs)
            parts.append(act[0].cpu())
            channels[block] = int(act.shape[1])
        return FeatureStack(data=torch.cat(parts, dim=0), checkpoint_id=self.checkpoint_id,
                            timesteps=(t,), blocks=tuple(taps), channels_per_block=channels)

    def extract_multi_t(self, image: torch.Tensor, timesteps: Sequence[int], blocks: Iterable[int],
                        image_id: Optional[str] = None) -> FeatureStack:
        """各时间步的特征按给定顺序拼接"""
        timesteps = [int(t) for t in timesteps]
        if not timesteps:
            raise ConfigError("时间步列表不能为空")
        for t in timesteps:
            corruption.check_timesteps(t, 0, self.num_timesteps)
        stacks = [self.extract(image, t, blocks, image_id) for t in timesteps]
        if len(stacks) == 1:
            return stacks[0]
        return FeatureStack(data=torch.cat([s.data for s in stacks], dim=0),
                            checkpoint_id=self.checkpoint_id, timesteps=tuple(timesteps),
                            blocks=stacks[0].blocks, channels_per_block=stacks[0].channels_per_block)

    def extract_many(self, images: Sequence[torch.Tensor], timesteps: Sequence[int], blocks: Iterable[int],
                     image_ids: Optional[Sequence[str]] = None, cache=None) -> List[FeatureStack]:
        """批量提取，可选使用磁盘缓存"""
        blocks = list(blocks)
        image_ids = list(image_ids) if image_ids is not None else [image_key(img) for img in images]
        stacks = []
        for image, image_id in zip(images, image_ids):
            stack = None
            if cache is not None:
                stack = cache.get(self.checkpoint_id, image_id, timesteps, blocks, self.clean_input, self.seed)
            if stack is None:
                stack = self.extract_multi_t(image, timesteps, blocks, image_id)
                if cache is not None:
                    cache.put(stack, image_id, self.clean_input, self.seed)
            stacks.append(stack)
        return stacks


def extract_features(model: UNetModel, image: torch.Tensor, t: int, blocks: Iterable[int],
                     schedule: DiffusionSchedule, method: str = "mdm", patch_size: int = 8,
                     seed: int = 0, image_id: Optional[str] = None, **kwargs) -> FeatureStack:
    """单时间步特征提取的函数式入口"""
    extractor = FeatureExtractor(model, schedule, method=method, patch_size=patch_size, seed=seed, **kwargs)
    return extractor.extract(image, t, blocks, image_id)


def extract_features_multi_t(model: UNetModel, image: torch.Tensor, timesteps: Sequence[int],
                             blocks: Iterable[int], schedule: DiffusionSchedule, method: str = "mdm",
                             patch_size: int = 8, seed: int = 0, image_id: Optional[str] = None,
                             **kwargs) -> FeatureStack:
    extractor = FeatureExtractor(model, schedule, method=method, patch_size=patch_size, seed=seed, **kwargs)
    return extractor.extract_multi_t(image, timesteps, blocks, image_id)
