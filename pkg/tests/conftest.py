#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测试公共夹具
小尺寸U-Net、模拟图像和临时合成数据集，保证单元测试在CPU上秒级完成
"""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from loguru import logger

from config import ConfigManager, RunConfig, SynthDataParams, UNetParams, build_run_config, config_to_dict
from data_management import write_synthetic_dataset
from diffusion_system import build_unet, make_beta_schedule

TINY_T = 20
CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def tiny_unet_params(**overrides) -> UNetParams:
    """16×16 输入、两级、每级一个残差块：共 4 个解码块"""
    params = dict(image_size=16, base_width=32, channel_mult=[1, 2], num_res_blocks=1,
                  attention_resolutions=[8], num_heads=4)
    params.update(overrides)
    return UNetParams(**params)


def create_mock_image(size: int = 16, channels: int = 3, seed: int = 0) -> torch.Tensor:
    """[-1,1] 内的随机图像 (C,H,W)"""
    generator = torch.Generator().manual_seed(seed)
    return torch.rand((channels, size, size), generator=generator) * 2 - 1


def create_mock_label(size: int = 16, num_classes: int = 3) -> np.ndarray:
    """左上、右下两个方块的类别图"""
    label = np.zeros((size, size), dtype=np.int64)
    half = size // 2
    label[:half, :half] = 1
    if num_classes > 2:
        label[half:, half:] = 2
    return label


def tiny_run_config(tmp_path: Path, manifest: str = None, **sections) -> RunConfig:
    """测试用配置：小U-Net、T=20、P=4、少量迭代，输出写到 tmp_path"""
    data = config_to_dict(RunConfig())
    data.update(run_name="tiny", output_dir=str(tmp_path / "outputs"))
    data["unet"] = dataclasses.asdict(tiny_unet_params())
    data["diffusion"].update(num_timesteps=TINY_T, patch_size=4)
    data["data"].update(manifest=manifest, crop_size=16)
    data["pretrain"].update(batch_size=4, iterations=6, checkpoint_every=3, log_every=2)
    data["features"].update(timesteps=[2], blocks=[1, 2], block_reference_count=4)
    data["seghead"].update(hidden_sizes=[16], pixel_batch_size=256, patience=20, max_steps=60, window=16)
    data["metrics"].update(seeds=[0])
    data["synth"].update(n_images=12, image_size=16, n_test=4, n_labelled=3,
                         output_dir=str(tmp_path / "synth"), min_class_fraction=0.0)
    data["reconstruct"].update(timesteps=[2, 10], num_images=2)
    data["cluster"].update(k=3, timestep=2, n_init=2)
    for section, values in sections.items():
        if isinstance(values, dict):
            data[section].update(values)
        else:
            data[section] = values
    return build_run_config(data)


@pytest.fixture(autouse=True)
def reset_logger():
    """运行目录里的 run.log 句柄在用例结束时释放"""
    yield
    logger.remove()


@pytest.fixture
def tiny_params() -> UNetParams:
    return tiny_unet_params()


@pytest.fixture
def tiny_model(tiny_params):
    return build_unet(tiny_params, seed=0, num_timesteps=TINY_T).eval()


@pytest.fixture
def tiny_schedule():
    return make_beta_schedule(TINY_T)


@pytest.fixture
def mock_image() -> torch.Tensor:
    return create_mock_image()


@pytest.fixture
def synthetic_manifest(tmp_path) -> Path:
    """12 张 16×16 合成图像：8 张预训练，3 张标注，4 张测试"""
    params = SynthDataParams(n_images=12, image_size=16, n_test=4, n_labelled=3, min_class_fraction=0.0)
    return write_synthetic_dataset(tmp_path / "synth", params, seed=0)


@pytest.fixture
def tiny_manager(tmp_path, synthetic_manifest, monkeypatch) -> ConfigManager:
    """已载入测试配置的 ConfigManager"""
    monkeypatch.delenv("MDM_OUTPUT_ROOT", raising=False)
    config_file = tmp_path / "tiny_config.json"
    config_file.write_text(json.dumps(config_to_dict(tiny_run_config(tmp_path, str(synthetic_manifest)))),
                           encoding="utf-8")
    manager = ConfigManager(config_dir=str(tmp_path))
    manager.load_config(str(config_file))
    return manager
