"""
数据管理系统 - 模块初始化文件

- image_io: 图像/标签文件 ↔ 张量
- manifest_loader: 数据清单加载与划分守卫
- augmentations: 随机裁剪与翻转
- synthetic_shapes: 桌面规模的合成形状数据集
- corruption_benchmark: 鲁棒性评估用的图像退化
"""

from .image_io import normalize_uint8, read_image, read_label, to_uint8, write_image, write_label
from .manifest_loader import DatasetManifest, ManifestEntry, SPLITS, load_manifest
from .augmentations import hflip, pad_image, random_crop, random_flip
from .synthetic_shapes import NUM_CLASSES, synth_image, synth_shapes, write_synthetic_dataset
from .corruption_benchmark import BENCHMARK_KINDS, EXTRA_KINDS, available_kinds, corrupt_test

__version__ = "1.0.0"
__description__ = "数据清单、增强、合成数据与退化基准"

__all__ = [
    'normalize_uint8', 'to_uint8', 'read_image', 'read_label', 'write_image', 'write_label',
    'DatasetManifest', 'ManifestEntry', 'SPLITS', 'load_manifest',
    'hflip', 'pad_image', 'random_crop', 'random_flip',
    'NUM_CLASSES', 'synth_image', 'synth_shapes', 'write_synthetic_dataset',
    'BENCHMARK_KINDS', 'EXTRA_KINDS', 'available_kinds', 'corrupt_test',
    'open_dataset',
]


def open_dataset(config):
    """按 RunConfig 打开数据清单；未配置时抛 ConfigError"""
    from errors import ConfigError

    if not config.data.manifest:
        raise ConfigError("未配置 data.manifest，可先运行 synth-data 生成合成数据集")
    return load_manifest(config.data.manifest)
