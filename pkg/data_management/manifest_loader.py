#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
数据清单加载器

清单为JSON文件，列出 pretrain / seg_train / seg_test 三个划分、类别数K和归一化方式：

{
    "num_classes": 3,
    "channels": 3,
    "normalization": "symmetric",
    "splits": {
        "pretrain": [{"image": "images/0000.png"}],
        "seg_train": [{"image": "images/0000.png", "label": "labels/0000.png"}],
        "seg_test": [{"image": "images/0150.png", "label": "labels/0150.png"}]
    }
}

路径相对于清单所在目录（或 "root" 字段）。
训练阶段（预训练、分割头训练）访问 seg_test 会被拒绝。
"""

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
from loguru import logger

from errors import DataError, ManifestValidationError

from .image_io import read_image, read_label

SPLITS = ("pretrain", "seg_train", "seg_test")
TRAINING_STAGES = ("pretrain", "train_head")
SUPPORTED_NORMALIZATION = ("symmetric",)


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    label: Optional[Path] = None

    @property
    def image_id(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    """校验过的数据清单"""
    path: Path
    root: Path
    num_classes: int
    channels: int
    normalization: str
    splits: Dict[str, List[ManifestEntry]]
    ignore_label: Optional[int] = None
    label_histograms: Dict[str, np.ndarray] = field(default_factory=dict)
    stage: Optional[str] = None

    # ------------------------------------------------------------------
    # 访问守卫
    # ------------------------------------------------------------------

    @contextmanager
    def use_stage(self, stage: str) -> Iterator["DatasetManifest"]:
        """在训练阶段内禁止读取 seg_test"""
        previous, self.stage = self.stage, stage
        try:
            yield self
        finally:
            self.stage = previous

    def _guard(self, split: str) -> None:
        if split not in SPLITS:
            raise ManifestValidationError(f"未知划分: {split}")
        if split == "seg_test" and self.stage in TRAINING_STAGES:
            raise ManifestValidationError(f"训练阶段 ({self.stage}) 禁止读取测试划分")

    # ------------------------------------------------------------------
    # 读取
    # ------------------------------------------------------------------

    def entries(self, split: str) -> List[ManifestEntry]:
        self._guard(split)
        return list(self.splits.get(split, []))

    def load_images(self, split: str, indices: Optional[List[int]] = None) -> List[torch.Tensor]:
        entries = self.entries(split)
        if indices is not None:
            entries = [entries[i] for i in indices]
        return [read_image(entry.image, self.channels) for entry in entries]

    def load_pairs(self, split: str, indices: Optional[List[int]] = None
                   ) -> Tuple[List[torch.Tensor], List[np.ndarray]]:
        """读取 (图像, 标签) 对，标签值已在加载清单时校验过"""
        entries = self.entries(split)
        if indices is not None:
            entries = [entries[i] for i in indices]
        images, labels = [], []
        for entry in entries:
            if entry.label is None:
                raise ManifestValidationError(f"{split} 中的 {entry.image} 缺少标签")
            images.append(read_image(entry.image, self.channels))
            labels.append(read_label(entry.label))
        return images, labels

    def stacked_images(self, split: str) -> torch.Tensor:
        """同尺寸图像堆叠为 (N,C,H,W)"""
        images = self.load_images(split)
        if not images:
            return torch.empty(0, self.channels, 0, 0)
        shapes = {tuple(img.shape) for img in images}
        if len(shapes) != 1:
            raise DataError(f"{split} 中图像尺寸不一致，无法堆叠: {sorted(shapes)}")
        return torch.stack(images)

    def image_ids(self, split: str) -> List[str]:
        return [entry.image_id for entry in self.entries(split)]

    def summary(self) -> Dict[str, int]:
        return {split: len(self.splits.get(split, [])) for split in SPLITS}


def _resolve(root: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (root / p)


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """
    读取并校验清单

    Raises:
        ManifestValidationError: 划分重叠、文件缺失、标签缺失、格式错误
        DataError: 标签值 ≥ K
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ManifestValidationError(f"无法读取清单 {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestValidationError(f"清单不是合法JSON {path}: {e}") from e

    try:
        num_classes = int(raw["num_classes"])
        raw_splits = raw["splits"]
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestValidationError(f"清单缺少必需字段 num_classes/splits: {e}") from e
    if num_classes < 2:
        raise ManifestValidationError(f"num_classes 至少为 2，得到 {num_classes}")
    unknown = set(raw_splits) - set(SPLITS)
    if unknown:
        raise ManifestValidationError(f"未知划分: {sorted(unknown)}")

    normalization = raw.get("normalization", "symmetric")
    if normalization not in SUPPORTED_NORMALIZATION:
        raise ManifestValidationError(f"不支持的归一化方式: {normalization}")

    root = _resolve(path.parent, raw.get("root", "."))
    splits: Dict[str, List[ManifestEntry]] = {}
    for split in SPLITS:
        entries = []
        for item in raw_splits.get(split, []):
            if isinstance(item, str):
                item = {"image": item}
            entry = ManifestEntry(image=_resolve(root, item["image"]), label=_resolve(root, item.get("label")))
            if not entry.image.is_file():
                raise ManifestValidationError(f"{split} 中的图像不存在: {entry.image}")
            if split != "pretrain":
                if entry.label is None:
                    raise ManifestValidationError(f"{split} 中的 {entry.image} 缺少标签文件")
                if not entry.label.is_file():
                    raise ManifestValidationError(f"{split} 中的标签文件不存在: {entry.label}")
            entries.append(entry)
        splits[split] = entries

    train_images = {e.image.resolve() for e in splits["seg_train"]}
    test_images = {e.image.resolve() for e in splits["seg_test"]}
    overlap = train_images & test_images
    if overlap:
        raise ManifestValidationError(f"seg_train 与 seg_test 重叠 {len(overlap)} 张: "
                                      f"{sorted(str(p) for p in overlap)[:5]}")
    pretrain_test = {e.image.resolve() for e in splits["pretrain"]} & test_images
    if pretrain_test:
        raise ManifestValidationError(f"pretrain 与 seg_test 重叠 {len(pretrain_test)} 张: "
                                      f"{sorted(str(p) for p in pretrain_test)[:5]}")

    manifest = DatasetManifest(
        path=path, root=root, num_classes=num_classes, channels=int(raw.get("channels", 3)),
        normalization=normalization, splits=splits, ignore_label=raw.get("ignore_label"),
    )
    manifest.label_histograms = _label_histograms(manifest)
    logger.info(f"清单已加载 {path}: {manifest.summary()}, K={num_classes}")
    return manifest


def _label_histograms(manifest: DatasetManifest) -> Dict[str, np.ndarray]:
    """逐划分统计类别像素数，同时检查标签 < K"""
    K = manifest.num_classes
    histograms = {}
    for split in ("seg_train", "seg_test"):
        counts = np.zeros(K, dtype=np.int64)
        for entry in manifest.splits[split]:
            label = read_label(entry.label)
            if manifest.ignore_label is not None:
                label = label[label != manifest.ignore_label]
            if label.size and (label.min() < 0 or label.max() >= K):
                raise DataError(f"标签 {entry.label} 的取值超出 [0, {K}): "
                                f"[{label.min()}, {label.max()}]")
            counts += np.bincount(label.ravel(), minlength=K)[:K]
        histograms[split] = counts
    return histograms
