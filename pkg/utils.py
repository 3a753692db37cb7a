#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
通用工具函数模块
日志初始化、随机种子、哈希、原子写入与交互输入
"""

import hashlib
import json
import os
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Any, Iterable, List, Optional, Union

import inquirer
import numpy as np
import torch
from loguru import logger

from errors import ArtifactError

PathLike = Union[str, os.PathLike]

__version__ = "1.0.0"

OUTPUT_ROOT_ENV = "MDM_OUTPUT_ROOT"

_LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{line} - {message}"


# ============================================================================
# 日志
# ============================================================================

def setup_logger(output_dir: Optional[PathLike] = None, level: str = "INFO") -> Optional[Path]:
    """
    初始化loguru日志：控制台 + 运行目录下的 run.log

    Args:
        output_dir: 运行输出目录，为None时只输出到控制台
        level: 日志级别

    Returns:
        日志文件路径（无文件时为None）
    """
    logger.remove()
    logger.add(sys.stderr, level=level, format=_LOG_FORMAT)

    if output_dir is None:
        return None

    log_path = Path(output_dir) / "run.log"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    logger.add(log_path, level=level, format=_LOG_FORMAT, encoding="utf-8")
    return log_path


# ============================================================================
# 随机种子
# ============================================================================

def seed_everything(seed: int, deterministic: bool = True) -> None:
    """设置全局随机种子，deterministic=True 时启用确定性算法"""
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


def make_generator(seed: int, device: Union[str, torch.device] = "cpu") -> torch.Generator:
    """创建独立的torch随机流"""
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def derive_seed(*parts: Any) -> int:
    """由任意可打印的部分派生一个稳定的63位种子（与进程、哈希随机化无关）"""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


# ============================================================================
# 哈希与文件
# ============================================================================

def sha256_file(path: PathLike, chunk_size: int = 1 << 20) -> str:
    """计算文件的sha256"""
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(chunk_size), b""):
                digest.update(chunk)
    except OSError as e:
        raise ArtifactError(f"无法读取文件: {e}", path=str(path)) from e
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """先写临时文件再rename，读者不会看到半个文件"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except OSError as e:
        raise ArtifactError(f"写入失败: {e}", path=str(path)) from e
    return path


def atomic_write_json(path: PathLike, payload: Any) -> Path:
    text = json.dumps(payload, indent=4, ensure_ascii=False, default=_json_default)
    return atomic_write_bytes(path, text.encode("utf-8"))


def _json_default(value: Any) -> Any:
    """把numpy/torch标量转成JSON可序列化的值"""
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, torch.Tensor):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"无法序列化类型: {type(value).__name__}")


def get_code_version() -> str:
    """包版本 + git提交号（不在git仓库中时只返回包版本）"""
    try:
        commit = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if commit.returncode == 0 and commit.stdout.strip():
            return f"{__version__}+{commit.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve_output_root(default: PathLike = "outputs") -> Path:
    """输出根目录，环境变量 MDM_OUTPUT_ROOT 优先"""
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or default)


def parse_int_list(text: str) -> List[int]:
    """'8,9,10' 或 '8-12' 形式的整数列表"""
    values: List[int] = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            start, end = part.split("-", 1)
            values.extend(range(int(start), int(end) + 1))
        else:
            values.append(int(part))
    return values


# ============================================================================
# 交互输入
# ============================================================================

def signal_handler(sig, frame):
    """处理Ctrl+C信号"""
    print('\n👋 程序被用户中断')
    sys.exit(0)


def safe_list_input(message: str, choices: List[Union[str, tuple]]) -> Optional[Any]:
    """
    安全的列表输入，支持ESC返回

    Args:
        message: 提示消息
        choices: 字符串列表或 (显示文本, 值) 元组列表

    Returns:
        选择的值，用户取消时返回None
    """
    if choices and isinstance(choices[0], tuple):
        display_choices = [choice[0] for choice in choices]
        values = [choice[1] for choice in choices]
    else:
        display_choices = list(choices)
        values = list(choices)

    try:
        selected = inquirer.list_input(message, choices=display_choices)
    except KeyboardInterrupt:
        print("\n🔙 返回上层菜单")
        return None

    if selected in display_choices:
        return values[display_choices.index(selected)]
    return selected


def safe_text_input(message: str, default: str = "") -> Optional[str]:
    try:
        result = inquirer.text(message, default=default)
        return result if result is not None else default
    except KeyboardInterrupt:
        print("\n🔙 返回上层菜单")
        return None


def format_mean_std(values: Iterable[float], scale: float = 100.0, decimals: int = 2) -> str:
    """均值±标准差，默认按百分比显示"""
    arr = np.asarray(list(values), dtype=np.float64) * scale
    if arr.size == 0:
        return "n/a"
    std = arr.std(ddof=0)
    return f"{arr.mean():.{decimals}f}±{std:.{decimals}f}"


__all__ = [
    'setup_logger',
    'seed_everything',
    'make_generator',
    'derive_seed',
    'sha256_file',
    'sha256_text',
    'atomic_write_bytes',
    'atomic_write_json',
    'get_code_version',
    'resolve_output_root',
    'parse_int_list',
    'signal_handler',
    'safe_list_input',
    'safe_text_input',
    'format_mean_std',
]
