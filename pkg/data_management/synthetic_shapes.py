#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
合成形状数据集
噪声背景上随机放置圆形和矩形，标签：背景=0，圆形=1，矩形=2。
每类有独立的颜色和纹理；每张图都包含全部三类，且各类像素占比不低于阈值。
"""

from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from config import SynthDataParams
from errors import DataError
from utils import atomic_write_json

from .image_io import write_image, write_label

BACKGROUND, CIRCLE, RECTANGLE = 0, 1, 2
NUM_CLASSES = 3
MAX_ATTEMPTS = 50


def _draw_circle(label: np.ndarray, rng: np.random.Generator, size: int) -> None:
    radius = rng.uniform(0.08, 0.18) * size
    cy, cx = rng.uniform(radius, size - radius, size=2)
    yy, xx = np.mgrid[:size, :size]
    label[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = CIRCLE


def _draw_rectangle(label: np.ndarray, rng: np.random.Generator, size: int) -> None:
    h, w = (rng.uniform(0.15, 0.35, size=2) * size).astype(int) + 2
    y0 = rng.integers(0, size - h + 1)
    x0 = rng.integers(0, size - w + 1)
    label[y0:y0 + h, x0:x0 + w] = RECTANGLE


def _render(label: np.ndarray, rng: np.random.Generator, noise_std: float) -> np.ndarray:
    """按标签渲染彩色图像 (H,W,3) uint8"""
    size = label.shape[0]
    yy, xx = np.mgrid[:size, :size]

    background = rng.uniform(0.25, 0.45) + 0.05 * np.sin(xx / rng.uniform(3, 6)) * np.cos(yy / rng.uniform(3, 6))
    image = np.repeat(background[:, :, None], 3, axis=2)

    circle_color = np.array([0.85, 0.35, 0.3]) + rng.uniform(-0.08, 0.08, size=3)
    rect_color = np.array([0.3, 0.45, 0.85]) + rng.uniform(-0.08, 0.08, size=3)
    stripes = 0.08 * ((xx + yy) // 3 % 2)[:, :, None]

    image = np.where((label == CIRCLE)[:, :, None], circle_color[None, None, :], image)
    image = np.where((label == RECTANGLE)[:, :, None], rect_color[None, None, :] + stripes, image)
    image = image + rng.normal(0.0, noise_std, size=image.shape)
    return (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)


def synth_image(index: int, image_size: int = 64, seed: int = 0, noise_std: float = 0.08,
                min_class_fraction: float = 0.01) -> Tuple[np.ndarray, np.ndarray]:
    """生成第 index 张图像及其标签，只由 (seed, index) 决定"""
    rng = np.random.default_rng([seed, index])
    for _ in range(MAX_ATTEMPTS):
        label = np.zeros((image_size, image_size), dtype=np.uint8)
        for _ in range(rng.integers(1, 3)):
            _draw_rectangle(label, rng, image_size)
        for _ in range(rng.integers(1, 3)):
            _draw_circle(label, rng, image_size)
        fractions = np.bincount(label.ravel(), minlength=NUM_CLASSES) / label.size
        if fractions.min() >= min_class_fraction:
            return _render(label, rng, noise_std), label
    raise DataError(f"第 {index} 张图像在 {MAX_ATTEMPTS} 次尝试内未满足类别占比 {min_class_fraction}")


def synth_shapes(n: int, image_size: int = 64, seed: int = 0, noise_std: float = 0.08,
                 min_class_fraction: float = 0.01) -> List[Tuple[np.ndarray, np.ndarray]]:
    """生成 n 张 (图像 uint8 (H,W,3), 标签 uint8 (H,W))"""
    if n < 1:
        raise DataError(f"n 至少为 1，得到 {n}")
    return [synth_image(i, image_size, seed, noise_std, min_class_fraction) for i in range(n)]


def write_synthetic_dataset(output_dir: Union[str, Path], params: Optional[SynthDataParams] = None,
                            seed: int = 0) -> Path:
    """
    写出合成数据集与清单

    划分：最后 n_test 张为 seg_test，前 n_labelled 张为 seg_train，其余非测试图像全部用于 pretrain

    Returns:
        manifest.json 路径
    """
    params = params or SynthDataParams()
    output_dir = Path(output_dir)
    n_train_pool = params.n_images - params.n_test

    records = []
    for i in tqdm(range(params.n_images), desc="生成合成数据", disable=None):
        image, label = synth_image(i, params.image_size, seed, params.noise_std, params.min_class_fraction)
        image_rel, label_rel = f"images/{i:04d}.png", f"labels/{i:04d}.png"
        write_image(output_dir / image_rel, image)
        write_label(output_dir / label_rel, label)
        records.append({"image": image_rel, "label": label_rel})

    manifest = {
        "name": "synthetic_shapes",
        "seed": seed,
        "num_classes": NUM_CLASSES,
        "channels": 3,
        "normalization": "symmetric",
        "class_names": ["background", "circle", "rectangle"],
        "splits": {
            "pretrain": [{"image": r["image"]} for r in records[:n_train_pool]],
            "seg_train": records[:params.n_labelled],
            "seg_test": records[n_train_pool:],
        },
    }
    path = atomic_write_json(output_dir / "manifest.json", manifest)
    logger.info(f"合成数据集已写出 {output_dir}: {params.n_images} 张, 测试 {params.n_test}, "
                f"标注 {params.n_labelled}")
    return path
