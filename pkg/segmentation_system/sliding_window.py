"""
滑动窗口推理

窗口原点沿每个轴取 0, w, 2w, …，覆盖不完整时补一个右/下对齐的窗口；
overwrite 模式下重叠像素取后一个窗口的结果，average 模式对重叠区域的logits取平均。
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from errors import ConfigError, DimensionError

from .feature_extractor import FeatureExtractor, image_key
from .pixel_classifier import SegmentationHead, logits_to_labels

_TORCH_PAD = {"reflect": "reflect", "replicate": "replicate", "constant": "constant"}


def window_origins(size: int, window: int) -> List[int]:
    """单个轴上的窗口原点（升序）"""
    if window < 1:
        raise ConfigError(f"窗口大小必须为正，得到 {window}")
    if window > size:
        raise ConfigError(f"窗口 {window} 大于图像尺寸 {size}")
    origins = list(range(0, size - window + 1, window))
    if origins[-1] + window < size:
        origins.append(size - window)
    return origins


def pad_to_window(image: torch.Tensor, window: int, pad_mode: Optional[str]) -> torch.Tensor:
    """图像不足一个窗口时在底部/右侧填充"""
    height, width = image.shape[-2:]
    pad_h, pad_w = max(window - height, 0), max(window - width, 0)
    if not pad_h and not pad_w:
        return image
    if pad_mode is None:
        raise ConfigError(f"图像 {height}×{width} 小于窗口 {window}，且未设置填充方式")
    if pad_mode not in _TORCH_PAD:
        raise ConfigError(f"未知的填充方式: {pad_mode}")
    if pad_mode == "reflect" and (pad_h >= height or pad_w >= width):
        # 反射填充要求填充量小于原尺寸
        pad_mode = "replicate"
    padded = F.pad(image[None], (0, pad_w, 0, pad_h), mode=_TORCH_PAD[pad_mode])
    return padded[0]


def predict_sliding(extractor: FeatureExtractor, head: SegmentationHead, image: torch.Tensor,
                    timesteps: Sequence[int], blocks: Sequence[int], window: int = 256,
                    stitch: str = "overwrite", pad_mode: Optional[str] = "reflect",
                    image_id: Optional[str] = None) -> np.ndarray:
    """
    整图推理，返回 (H, W) int64 标签图

    每个窗口单独提取特征并预测，窗口按行优先顺序拼接
    """
    if image.dim() != 3:
        raise DimensionError(f"需要单张图像 (C,H,W)，得到 {tuple(image.shape)}")
    if window != extractor.model.image_size:
        raise ConfigError(f"窗口 {window} 必须等于模型输入尺寸 {extractor.model.image_size}")
    if stitch not in ("overwrite", "average"):
        raise ConfigError(f"未知的拼接方式: {stitch}")

    height, width = image.shape[-2:]
    padded = pad_to_window(image, window, pad_mode)
    padded_h, padded_w = padded.shape[-2:]
    key = image_id if image_id is not None else image_key(image)

    labels = np.full((padded_h, padded_w), -1, dtype=np.int64)
    logit_sum = torch.zeros(head.num_classes, padded_h, padded_w) if stitch == "average" else None
    counts = torch.zeros(padded_h, padded_w) if stitch == "average" else None

    for oy in window_origins(padded_h, window):
        for ox in window_origins(padded_w, window):
            tile = padded[:, oy:oy + window, ox:ox + window]
            tile_id = key if (padded_h, padded_w) == (window, window) else f"{key}@{oy},{ox}"
            stack = extractor.extract_multi_t(tile, timesteps, blocks, tile_id)
            logits = head.predict_logits(stack)
            if stitch == "overwrite":
                labels[oy:oy + window, ox:ox + window] = logits_to_labels(logits)
            else:
                logit_sum[:, oy:oy + window, ox:ox + window] += logits
                counts[oy:oy + window, ox:ox + window] += 1

    if stitch == "average":
        labels = logits_to_labels(logit_sum / counts)
    return labels[:height, :width]


def tile_pairs(image: torch.Tensor, label: np.ndarray, window: int,
               pad_mode: Optional[str] = "reflect") -> List[Tuple[torch.Tensor, np.ndarray, Tuple[int, int]]]:
    """
    把标注图像切成与推理相同的窗口，返回 [(图像块, 标签块, (oy, ox))]

    填充区域的标签与图像按同样方式填充
    """
    label = np.asarray(label)
    if tuple(label.shape) != tuple(image.shape[-2:]):
        raise DimensionError(f"标签 {label.shape} 与图像 {tuple(image.shape[-2:])} 尺寸不符")
    height, width = label.shape
    padded = pad_to_window(image, window, pad_mode)
    pad_h, pad_w = padded.shape[-2] - height, padded.shape[-1] - width
    if pad_h or pad_w:
        np_mode = {"reflect": "reflect", "replicate": "edge", "constant": "constant"}[pad_mode]
        if np_mode == "reflect" and (pad_h >= height or pad_w >= width):
            np_mode = "edge"
        label = np.pad(label, ((0, pad_h), (0, pad_w)), mode=np_mode)

    tiles = []
    for oy in window_origins(padded.shape[-2], window):
        for ox in window_origins(padded.shape[-1], window):
            tiles.append((padded[:, oy:oy + window, ox:ox + window],
                          label[oy:oy + window, ox:ox + window], (oy, ox)))
    return tiles
