#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
数据增强
随机裁剪（不足时先反射填充）与随机水平翻转，图像与标签同步变换
"""

from typing import Optional, Tuple, Union

import numpy as np
import torch

Label = Optional[Union[torch.Tensor, np.ndarray]]


def _pad_to(array: np.ndarray, height: int, width: int, mode: str) -> np.ndarray:
    """在底部/右侧填充到至少 height×width（最后两维）"""
    pad_h = max(height - array.shape[-2], 0)
    pad_w = max(width - array.shape[-1], 0)
    if not pad_h and not pad_w:
        return array
    pad = [(0, 0)] * (array.ndim - 2) + [(0, pad_h), (0, pad_w)]
    return np.pad(array, pad, mode=mode)


def pad_image(image: torch.Tensor, height: int, width: int, mode: str = "reflect") -> torch.Tensor:
    return torch.from_numpy(_pad_to(image.cpu().numpy(), height, width, mode))


def random_crop(image: torch.Tensor, label: Label = None, size: int = 256,
                generator: Optional[torch.Generator] = None, pad_mode: str = "reflect",
                return_origin: bool = False):
    """
    对齐裁剪图像 (C,H,W) 与标签 (H,W)，原点在合法范围内均匀采样

    Returns:
        (image, label) 或 return_origin=True 时 (image, label, (oy, ox))
    """
    height, width = image.shape[-2], image.shape[-1]
    if height < size or width < size:
        image = pad_image(image, size, size, pad_mode)
        if label is not None:
            label = _as_like(label, _pad_to(_to_numpy(label), size, size, pad_mode))
        height, width = image.shape[-2], image.shape[-1]

    oy = int(torch.randint(0, height - size + 1, (1,), generator=generator))
    ox = int(torch.randint(0, width - size + 1, (1,), generator=generator))
    cropped = image[..., oy:oy + size, ox:ox + size]
    cropped_label = None if label is None else label[..., oy:oy + size, ox:ox + size]
    if return_origin:
        return cropped, cropped_label, (oy, ox)
    return cropped, cropped_label


def random_flip(image: torch.Tensor, label: Label = None,
                generator: Optional[torch.Generator] = None, p: float = 0.5) -> Tuple[torch.Tensor, Label]:
    """以概率 p 水平翻转，列 j → W−1−j"""
    flip = float(torch.rand((1,), generator=generator)) < p
    if not flip:
        return image, label
    return hflip(image, label)


def hflip(image: torch.Tensor, label: Label = None) -> Tuple[torch.Tensor, Label]:
    """确定性水平翻转"""
    flipped_label = None
    if label is not None:
        flipped_label = _as_like(label, np.ascontiguousarray(_to_numpy(label)[..., ::-1]))
    return torch.flip(image, dims=[-1]), flipped_label


def _to_numpy(label: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    return label.cpu().numpy() if isinstance(label, torch.Tensor) else np.asarray(label)


def _as_like(reference: Union[torch.Tensor, np.ndarray], array: np.ndarray):
    return torch.from_numpy(array) if isinstance(reference, torch.Tensor) else array
