#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
配置管理模块
用于管理预训练、特征提取、分割头和评估参数，以及配置文件的加载、覆盖与冻结
"""

import dataclasses
import json
from dataclasses import field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import inquirer
from loguru import logger
from pydantic import ConfigDict, NonNegativeFloat, NonNegativeInt, PositiveFloat, PositiveInt, ValidationError
from pydantic.dataclasses import dataclass

from errors import ConfigError
from utils import atomic_write_json, get_code_version, resolve_output_root

STRICT = ConfigDict(extra="forbid", validate_assignment=True)

CORRUPTION_KINDS = [
    "gaussian_noise", "shot_noise", "impulse_noise", "gaussian_blur",
    "defocus_blur", "brightness", "contrast", "jpeg",
]


@dataclass(config=STRICT)
class DataParams:
    """数据参数"""
    manifest: Optional[str] = None
    crop_size: PositiveInt = 256            # 预训练图像大于模型输入时的随机裁剪尺寸
    flip_prob: float = 0.5
    num_workers: NonNegativeInt = 0


@dataclass(config=STRICT)
class UNetParams:
    """U-Net结构参数（默认即桌面规模）"""
    image_size: PositiveInt = 64
    in_channels: PositiveInt = 3
    base_width: PositiveInt = 64
    channel_mult: List[PositiveInt] = field(default_factory=lambda: [1, 2, 2])
    num_res_blocks: PositiveInt = 2
    attention_resolutions: List[PositiveInt] = field(default_factory=lambda: [16])
    num_heads: PositiveInt = 4
    time_embed_dim: Optional[PositiveInt] = None   # 默认 4 × base_width
    dropout: NonNegativeFloat = 0.0
    out_channels: Optional[PositiveInt] = None     # 默认等于 in_channels
    resblock_updown: bool = True
    use_scale_shift_norm: bool = True

    @classmethod
    def desk(cls) -> "UNetParams":
        return cls()

    @classmethod
    def reference(cls) -> "UNetParams":
        """256×256 全尺寸结构，解码器共18个块"""
        return cls(
            image_size=256,
            base_width=256,
            channel_mult=[1, 1, 2, 2, 4, 4],
            num_res_blocks=2,
            attention_resolutions=[32, 16, 8],
        )

    @property
    def num_decoder_blocks(self) -> int:
        return len(self.channel_mult) * (self.num_res_blocks + 1)


@dataclass(config=STRICT)
class DiffusionParams:
    """扩散/掩码过程参数：T、β端点、patch大小"""
    num_timesteps: PositiveInt = 1000
    schedule: str = "linear"
    beta_start: PositiveFloat = 1e-4
    beta_end: PositiveFloat = 2e-2
    patch_size: PositiveInt = 8
    mask_value: float = 0.0
    min_alpha_bar: PositiveFloat = 1e-8


@dataclass(config=STRICT)
class PretrainParams:
    """预训练参数"""
    method: Literal["mdm", "ddpm"] = "mdm"
    loss: Literal["ssim", "mse"] = "ssim"
    target: Literal["image", "noise"] = "image"
    fixed_t: Optional[PositiveInt] = None
    batch_size: PositiveInt = 128
    iterations: NonNegativeInt = 10000
    learning_rate: PositiveFloat = 1e-4
    checkpoint_every: PositiveInt = 1000
    log_every: PositiveInt = 100
    divergence_patience: PositiveInt = 10
    ssim_window: PositiveInt = 11
    ssim_sigma: PositiveFloat = 1.5

    def check(self, num_timesteps: int) -> None:
        reason = infeasible_reason(self.method, self.loss, self.target, self.fixed_t, num_timesteps)
        if reason:
            raise ConfigError(reason)


@dataclass(config=STRICT)
class FeatureParams:
    """特征提取参数"""
    timesteps: List[NonNegativeInt] = field(default_factory=lambda: [50])
    blocks: List[NonNegativeInt] = field(default_factory=lambda: [8, 9, 10, 11, 12])
    block_reference_count: PositiveInt = 18        # blocks 按该块数编号，模型块数不同时按比例映射
    upsample_mode: Literal["bilinear", "nearest"] = "bilinear"
    clean_input: bool = False
    cache_dir: Optional[str] = None
    batch_size: PositiveInt = 8


@dataclass(config=STRICT)
class SegHeadParams:
    """像素分类头参数"""
    hidden_sizes: List[PositiveInt] = field(default_factory=lambda: [128, 128])
    learning_rate: PositiveFloat = 1e-3
    pixel_batch_size: PositiveInt = 65536
    patience: PositiveInt = 1000
    max_steps: PositiveInt = 20000
    smoothing: float = 0.99
    ignore_label: Optional[int] = None
    label_fraction: PositiveFloat = 1.0
    window: PositiveInt = 256
    stitch: Literal["overwrite", "average"] = "overwrite"
    pad_mode: Optional[Literal["reflect", "replicate", "constant"]] = "reflect"


@dataclass(config=STRICT)
class MetricsParams:
    seeds: List[NonNegativeInt] = field(default_factory=lambda: list(range(10)))
    connectivity: Literal[4, 8] = 4
    dataset_name: str = "synthetic_shapes"


@dataclass(config=STRICT)
class RobustnessParams:
    kinds: List[str] = field(default_factory=lambda: list(CORRUPTION_KINDS))
    severities: List[PositiveInt] = field(default_factory=lambda: [1, 2, 3, 4, 5])


@dataclass(config=STRICT)
class ReconstructParams:
    timesteps: List[NonNegativeInt] = field(default_factory=lambda: [50, 250, 450, 750])
    num_images: PositiveInt = 4
    split: Literal["pretrain", "seg_train", "seg_test"] = "pretrain"


@dataclass(config=STRICT)
class ClusterParams:
    k: PositiveInt = 5
    blocks: Optional[List[NonNegativeInt]] = None   # None = 全部解码块（按模型自身编号）
    timestep: NonNegativeInt = 50
    n_init: PositiveInt = 10
    image_index: NonNegativeInt = 0
    split: Literal["pretrain", "seg_train", "seg_test"] = "seg_train"


@dataclass(config=STRICT)
class AblationParams:
    """消融网格：各轴做笛卡尔积，None 表示沿用主配置"""
    methods: List[Literal["mdm", "ddpm"]] = field(default_factory=lambda: ["mdm"])
    losses: List[Literal["ssim", "mse"]] = field(default_factory=lambda: ["ssim"])
    targets: List[Literal["image", "noise"]] = field(default_factory=lambda: ["image"])
    fixed_ts: List[Optional[PositiveInt]] = field(default_factory=lambda: [None])
    extract_timesteps: List[List[NonNegativeInt]] = field(default_factory=lambda: [[50]])
    patch_sizes: List[PositiveInt] = field(default_factory=lambda: [8])
    iterations: List[Optional[NonNegativeInt]] = field(default_factory=lambda: [None])
    max_workers: PositiveInt = 1


@dataclass(config=STRICT)
class SynthDataParams:
    n_images: PositiveInt = 200
    image_size: PositiveInt = 64
    n_test: NonNegativeInt = 50
    n_labelled: PositiveInt = 5
    output_dir: str = "data/synthetic_shapes"
    noise_std: NonNegativeFloat = 0.08
    min_class_fraction: NonNegativeFloat = 0.01


@dataclass(config=STRICT)
class RunConfig:
    """一次运行的完整配置"""
    run_name: str = "desk_mdm"
    description: str = ""
    seed: int = 0
    output_dir: str = "outputs"
    device: str = "cpu"
    deterministic: bool = True
    log_level: str = "INFO"
    data: DataParams = field(default_factory=DataParams)
    unet: UNetParams = field(default_factory=UNetParams)
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    pretrain: PretrainParams = field(default_factory=PretrainParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    seghead: SegHeadParams = field(default_factory=SegHeadParams)
    metrics: MetricsParams = field(default_factory=MetricsParams)
    robustness: RobustnessParams = field(default_factory=RobustnessParams)
    reconstruct: ReconstructParams = field(default_factory=ReconstructParams)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    ablation: AblationParams = field(default_factory=AblationParams)
    synth: SynthDataParams = field(default_factory=SynthDataParams)


SECTIONS = ["data", "unet", "diffusion", "pretrain", "features", "seghead", "metrics",
            "robustness", "reconstruct", "cluster", "ablation", "synth"]


def infeasible_reason(method: str, loss: str, target: str, fixed_t: Optional[int],
                      num_timesteps: int) -> Optional[str]:
    """预训练组合不可行时返回原因，可行时返回None"""
    if method == "mdm" and target == "noise":
        return "mdm 只能重建图像 (target=image)，不能预测噪声"
    if target == "noise" and loss == "ssim":
        return "预测噪声时只支持 mse 损失"
    if fixed_t is not None and not 1 <= fixed_t <= num_timesteps:
        return f"fixed_t={fixed_t} 超出范围 [1, {num_timesteps}]"
    return None


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(config)


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    """从字典构造并校验配置，未知键或非法取值抛 ConfigError"""
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}") from e
    except TypeError as e:
        raise ConfigError(f"配置键错误: {e}") from e


def parse_override(text: str) -> Tuple[str, Optional[str], Any]:
    """
    解析 --set 覆盖项

    'section.key=value' 返回 (section, key, value)；'key=value' 返回 (key, None, value)
    value 先按JSON解析，失败时按字符串处理
    """
    if "=" not in text:
        raise ConfigError(f"覆盖项格式应为 section.key=value: {text}")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if "." in dotted:
        section, key = dotted.split(".", 1)
        return section.strip(), key.strip(), value
    return dotted.strip(), None, value


class ConfigManager:
    """配置管理器"""

    def __init__(self, config_dir: str = "configs"):
        self.config_dir = config_dir
        self.config_file: Optional[str] = None
        self.config = RunConfig()

    # ------------------------------------------------------------------
    # 加载
    # ------------------------------------------------------------------

    def resolve_config_path(self, name_or_path: str) -> Path:
        """预设名（desk_mdm）或文件路径 → 配置文件路径"""
        candidates = [
            Path(name_or_path),
            Path(self.config_dir) / f"{name_or_path}_config.json",
            Path(self.config_dir) / f"{name_or_path}.json",
        ]
        for candidate in candidates:
            if candidate.is_file():
                return candidate
        raise ConfigError(f"未找到配置: {name_or_path}（已查找 {[str(c) for c in candidates]}）")

    def load_config(self, name_or_path: str) -> RunConfig:
        """从文件加载配置，文件中未出现的键使用默认值"""
        path = self.resolve_config_path(name_or_path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                config_data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"读取配置文件 {path} 失败: {e}") from e

        self.config_file = str(path)
        self.apply_config_data(config_data)
        logger.info(f"配置已从 {path} 加载")
        return self.config

    def apply_config_data(self, config_data: Dict[str, Any]) -> RunConfig:
        """把（可能不完整的）配置字典合并到当前配置上"""
        merged = config_to_dict(self.config)
        for key, value in config_data.items():
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"配置段 {key} 必须是对象")
                merged[key].update(value)
            else:
                merged[key] = value
        self.config = build_run_config(merged)
        return self.config

    def apply_overrides(self, overrides: Optional[List[str]]) -> RunConfig:
        """应用 --set section.key=value 覆盖项"""
        if not overrides:
            return self.config
        patch: Dict[str, Any] = {}
        for text in overrides:
            section, key, value = parse_override(text)
            if key is None:
                patch[section] = value
            else:
                if section not in SECTIONS:
                    raise ConfigError(f"未知配置段: {section}")
                patch.setdefault(section, {})[key] = value
        logger.debug(f"应用覆盖项: {patch}")
        return self.apply_config_data(patch)

    # ------------------------------------------------------------------
    # 校验与冻结
    # ------------------------------------------------------------------

    def validate_config(self) -> RunConfig:
        """跨字段校验，不通过时抛 ConfigError"""
        # 延迟导入：data_management 依赖本模块
        from data_management.corruption_benchmark import available_kinds

        cfg = self.config
        T = cfg.diffusion.num_timesteps
        errors = []

        reason = infeasible_reason(cfg.pretrain.method, cfg.pretrain.loss, cfg.pretrain.target,
                                   cfg.pretrain.fixed_t, T)
        if reason:
            errors.append(reason)
        if cfg.unet.image_size % cfg.diffusion.patch_size:
            errors.append(f"patch_size={cfg.diffusion.patch_size} 不能整除 image_size={cfg.unet.image_size}")
        if cfg.diffusion.beta_start >= 1 or cfg.diffusion.beta_end >= 1:
            errors.append("β 端点必须在 (0, 1) 内")
        if not cfg.features.timesteps:
            errors.append("features.timesteps 不能为空")
        if any(t > T for t in cfg.features.timesteps):
            errors.append(f"features.timesteps 超出 [0, {T}]")
        if not 0 < cfg.seghead.label_fraction <= 1:
            errors.append("seghead.label_fraction 必须在 (0, 1] 内")
        if not 0 <= cfg.seghead.smoothing < 1:
            errors.append("seghead.smoothing 必须在 [0, 1) 内")
        if cfg.cluster.k < 2:
            errors.append("cluster.k 至少为 2")
        if cfg.synth.n_test + cfg.synth.n_labelled > cfg.synth.n_images:
            errors.append("synth.n_test + synth.n_labelled 超过 synth.n_images")
        unknown_kinds = set(cfg.robustness.kinds) - set(available_kinds())
        if unknown_kinds:
            errors.append(f"未知的退化类型: {sorted(unknown_kinds)}")
        if any(s > 5 for s in cfg.robustness.severities):
            errors.append("robustness.severities 只支持 1..5")

        if errors:
            raise ConfigError("; ".join(errors))
        return cfg

    def run_directory(self, command: str) -> Path:
        """运行输出目录：<输出根>/<run_name>/<子命令>"""
        root = resolve_output_root(self.config.output_dir)
        return root / self.config.run_name / command

    def save_resolved_config(self, run_dir: Union[str, Path], command: str = "") -> Path:
        """写出冻结的完整配置和代码版本"""
        payload = {
            "command": command,
            "code_version": get_code_version(),
            "created_at": datetime.now().isoformat(timespec="seconds"),
            "source": self.config_file,
            "config": config_to_dict(self.config),
        }
        return atomic_write_json(Path(run_dir) / "resolved_config.json", payload)

    # ------------------------------------------------------------------
    # 交互
    # ------------------------------------------------------------------

    def interactive_config(self) -> RunConfig:
        """交互式选择预设并调整常用参数"""
        from multi_config_manager import MultiConfigManager

        multi_manager = MultiConfigManager(self.config_dir)
        preset = multi_manager.interactive_preset_selection()
        if preset:
            self.config = RunConfig()
            self.load_config(preset)

        if inquirer.confirm("是否调整常用参数?", default=False):
            self._quick_adjust()
        return self.validate_config()

    def _quick_adjust(self) -> None:
        """快速调整：种子、迭代次数、输出目录"""
        seed = inquirer.text("随机种子", default=str(self.config.seed),
                             validate=lambda _, x: x.lstrip("-").isdigit())
        iterations = inquirer.text("预训练迭代次数", default=str(self.config.pretrain.iterations),
                                   validate=lambda _, x: x.isdigit())
        output_dir = inquirer.text("输出目录", default=self.config.output_dir)
        self.apply_config_data({
            "seed": int(seed),
            "output_dir": output_dir,
            "pretrain": {"iterations": int(iterations)},
        })

    def print_current_config(self) -> None:
        """打印当前配置"""
        cfg = self.config
        print(f"\n=== 当前运行配置: {cfg.run_name} ===")
        if cfg.description:
            print(f"  {cfg.description}")
        print("🧠 预训练:")
        print(f"  方法: {cfg.pretrain.method}  损失: {cfg.pretrain.loss}  目标: {cfg.pretrain.target}")
        print(f"  T: {cfg.diffusion.num_timesteps}  patch: {cfg.diffusion.patch_size}  "
              f"fixed_t: {cfg.pretrain.fixed_t}")
        print(f"  batch: {cfg.pretrain.batch_size}  迭代: {cfg.pretrain.iterations}  "
              f"lr: {cfg.pretrain.learning_rate}")
        print("🏗️  U-Net:")
        print(f"  输入: {cfg.unet.image_size}×{cfg.unet.image_size}×{cfg.unet.in_channels}  "
              f"宽度: {cfg.unet.base_width}  倍率: {cfg.unet.channel_mult}  "
              f"注意力: {cfg.unet.attention_resolutions}")
        print("🎯 分割:")
        print(f"  特征时间步: {cfg.features.timesteps}  解码块: {cfg.features.blocks}")
        print(f"  MLP: {cfg.seghead.hidden_sizes}  像素batch: {cfg.seghead.pixel_batch_size}  "
              f"标签比例: {cfg.seghead.label_fraction}")
        print(f"📁 输出: {resolve_output_root(cfg.output_dir)}  种子: {cfg.seed}")
