#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
图像读写
8位 PNG/JPEG 图像 ↔ [-1,1] 浮点张量 (C,H,W)；单通道PNG标签 ↔ 整数类别图 (H,W)
"""

from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

from errors import ArtifactError, DataError

PathLike = Union[str, Path]


def normalize_uint8(array: np.ndarray) -> torch.Tensor:
    """uint8 (H,W,C) 或 (H,W) → [-1,1] 的 (C,H,W) float32"""
    if array.ndim == 2:
        array = array[:, :, None]
    tensor = torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).to(torch.float32)
    return tensor / 127.5 - 1.0


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """[-1,1] 的 (C,H,W) → uint8 (H,W,C)；单通道时返回 (H,W)"""
    array = ((image.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    array = array.transpose(1, 2, 0)
    return array[:, :, 0] if array.shape[2] == 1 else array


def read_image(path: PathLike, channels: int = 3) -> torch.Tensor:
    """读取图像并归一化到 [-1,1]"""
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise DataError(f"不支持的通道数: {channels}")
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert(mode), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ArtifactError(f"图像读取失败: {e}", path=str(path)) from e
    return normalize_uint8(array)


def read_label(path: PathLike) -> np.ndarray:
    """读取单通道标签PNG，像素值即类别号"""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I", "I;16"):
                raise DataError(f"标签图必须为单通道，得到模式 {img.mode}: {path}")
            return np.asarray(img, dtype=np.int64)
    except OSError as e:
        raise ArtifactError(f"标签读取失败: {e}", path=str(path)) from e


def write_image(path: PathLike, image: Union[torch.Tensor, np.ndarray]) -> Path:
    """写出图像，张量视为 [-1,1] 的 (C,H,W)，数组视为 uint8"""
    path = Path(path)
    array = to_uint8(image) if isinstance(image, torch.Tensor) else np.asarray(image, dtype=np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array).save(path)
    except OSError as e:
        raise ArtifactError(f"图像写入失败: {e}", path=str(path)) from e
    return path


def write_label(path: PathLike, label: Union[torch.Tensor, np.ndarray]) -> Path:
    """写出单通道整数标签PNG（类别号需 < 256）"""
    path = Path(path)
    array = label.detach().cpu().numpy() if isinstance(label, torch.Tensor) else np.asarray(label)
    if array.size and (array.min() < 0 or array.max() > 255):
        raise DataError(f"标签值超出 8 位范围: [{array.min()}, {array.max()}]")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array.astype(np.uint8), mode="L").save(path)
    except OSError as e:
        raise ArtifactError(f"标签写入失败: {e}", path=str(path)) from e
    return path
