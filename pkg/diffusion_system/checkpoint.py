"""
检查点读写

检查点 = 模型参数 + UNetParams + DiffusionParams + β调度 + 格式版本；
训练检查点额外保存优化器、随机流状态、迭代数和损失历史，用于逐位续训。
写入采用 临时文件 + rename。
"""

import dataclasses
import hashlib
import io
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
from loguru import logger

from config import DiffusionParams, UNetParams
from errors import ArtifactError
from utils import atomic_write_bytes, sha256_file

from .corruption import DiffusionSchedule, make_beta_schedule
from .unet import UNetModel, build_unet

FORMAT_VERSION = 1

PathLike = Union[str, Path]


def save_checkpoint(path: PathLike, model: UNetModel, diffusion: DiffusionParams,
                    schedule: Optional[DiffusionSchedule] = None,
                    training_state: Optional[Dict[str, Any]] = None,
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """原子写入检查点"""
    schedule = schedule or schedule_from_params(diffusion)
    payload = {
        "format_version": FORMAT_VERSION,
        "model_state": model.state_dict(),
        "unet_params": dataclasses.asdict(model.params),
        "diffusion_params": dataclasses.asdict(diffusion),
        "schedule": schedule.to_dict(),
        "training_state": training_state,
        "metadata": metadata or {},
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    path = atomic_write_bytes(path, buffer.getvalue())
    logger.debug(f"检查点已写入 {path}")
    return path


def load_checkpoint(path: PathLike, map_location: Union[str, torch.device] = "cpu") -> Dict[str, Any]:
    """读取检查点字典并检查格式版本"""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError("检查点不存在", path=str(path))
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise ArtifactError(f"检查点读取失败: {e}", path=str(path)) from e
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != FORMAT_VERSION:
        raise ArtifactError(f"不支持的检查点格式版本: {version}", path=str(path))
    return payload


def schedule_from_params(diffusion: DiffusionParams) -> DiffusionSchedule:
    return make_beta_schedule(diffusion.num_timesteps, diffusion.schedule,
                              diffusion.beta_start, diffusion.beta_end)


def load_model(path: PathLike, map_location: Union[str, torch.device] = "cpu"
               ) -> Tuple[UNetModel, DiffusionParams, DiffusionSchedule, Dict[str, Any]]:
    """
    从检查点恢复模型

    Returns:
        (model, diffusion_params, schedule, payload)，模型处于 eval 模式
    """
    payload = load_checkpoint(path, map_location)
    unet_params = UNetParams(**payload["unet_params"])
    diffusion = DiffusionParams(**payload["diffusion_params"])
    model = build_unet(unet_params, num_timesteps=diffusion.num_timesteps)
    model.load_state_dict(payload["model_state"])
    model.eval()
    schedule = DiffusionSchedule.from_dict(payload["schedule"])
    return model, diffusion, schedule, payload


def checkpoint_sha256(path: PathLike) -> str:
    return sha256_file(path)


def model_state_hash(model: torch.nn.Module) -> str:
    """参数内容的哈希，用于确认特征提取不修改模型"""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
