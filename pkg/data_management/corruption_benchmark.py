#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
鲁棒性评估用的图像退化

退化实现来自 imagecorruptions（15 种基准退化 + 4 种扩展退化，每种 5 级强度）。
这里负责 [-1,1] 张量与 uint8 图像之间的转换、小图填充，以及把随机源固定到调用方给的 generator 上。
"""

from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional

import numpy as np
import torch
from imagecorruptions import corrupt

from errors import ConfigError, DimensionError

from .image_io import normalize_uint8, to_uint8

BENCHMARK_KINDS = [
    "gaussian_noise", "shot_noise", "impulse_noise",
    "defocus_blur", "glass_blur", "motion_blur", "zoom_blur",
    "snow", "frost", "fog",
    "brightness", "contrast", "elastic", "pixelate", "jpeg",
]
EXTRA_KINDS = ["speckle_noise", "gaussian_blur", "spatter", "saturate"]

# 与库里的名字不同的别名
LIBRARY_NAMES: Dict[str, str] = {"elastic": "elastic_transform", "jpeg": "jpeg_compression"}

# 库要求的最小边长
MIN_SIZE = 32


def available_kinds() -> List[str]:
    return BENCHMARK_KINDS + EXTRA_KINDS


def _check(kind: str, severity: int) -> None:
    if kind not in available_kinds():
        raise ConfigError(f"未知退化类型: {kind}（可选 {available_kinds()}）")
    if not 0 <= severity <= 5:
        raise ConfigError(f"强度必须在 0..5，得到 {severity}")


@contextmanager
def _numpy_seed(seed: Optional[int]) -> Iterator[None]:
    """临时设定全局 numpy 随机状态，退出时恢复"""
    if seed is None:
        yield
        return
    state = np.random.get_state()
    np.random.seed(seed)
    try:
        yield
    finally:
        np.random.set_state(state)


def corrupt_test(image: torch.Tensor, kind: str, severity: int,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    对 [-1,1] 的 (C,H,W) 图像施加指定退化

    severity=0 原样返回副本。边长小于 32 的图像先做对称填充，退化后裁回原尺寸。
    generator 给出时结果只由它决定（impulse_noise 除外，其随机源在 scikit-image 内部）。
    """
    _check(kind, severity)
    if severity == 0:
        return image.clone()
    if image.dim() != 3 or image.shape[0] not in (1, 3):
        raise DimensionError(f"需要 (1|3, H, W) 图像，得到 {tuple(image.shape)}")

    channels, height, width = image.shape
    array = to_uint8(image.detach().cpu().float())
    if array.ndim == 2:
        array = np.repeat(array[:, :, None], 3, axis=2)
    pad = ((0, max(MIN_SIZE - height, 0)), (0, max(MIN_SIZE - width, 0)), (0, 0))
    array = np.pad(array, pad, mode="symmetric")

    seed = None
    if generator is not None:
        seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator))
    with _numpy_seed(seed):
        corrupted = corrupt(array, severity=severity, corruption_name=LIBRARY_NAMES.get(kind, kind))

    corrupted = np.asarray(corrupted, dtype=np.uint8)[:height, :width]
    restored = normalize_uint8(corrupted)
    if channels == 1:
        restored = restored[:1]
    return restored.to(image.dtype)
