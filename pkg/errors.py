#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
异常定义模块
统一的异常层级，每个异常同时继承对应的内置异常，调用方可以按任意一层捕获
"""

from typing import Any, Dict, Optional


class MDMError(Exception):
    """掩码扩散工具包的异常基类"""


class ConfigError(MDMError, ValueError):
    """配置错误：未知键、非法枚举值、不可行的参数组合"""


class DimensionError(MDMError, ValueError):
    """维度错误：形状不匹配或不可整除"""


class TimestepRangeError(MDMError, ValueError):
    """范围错误：时间步或解码块索引越界"""


# 兼容名称
RangeError = TimestepRangeError


class NumericalDomainError(MDMError, ArithmeticError):
    """数值域错误：例如 ᾱ_t 过小无法安全相除"""


class DataError(MDMError, ValueError):
    """数据错误：标签越界、没有有效像素等"""


class ManifestValidationError(DataError):
    """数据清单校验失败：划分重叠、标签缺失、训练期访问测试集"""


class DegenerateInputError(MDMError, ValueError):
    """退化输入：聚类时不同特征向量数量不足"""


class TrainingDivergenceError(MDMError, RuntimeError):
    """训练发散：连续出现非有限损失"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ArtifactError(MDMError, OSError):
    """产物读写错误或来源不一致"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message} (path: {path})" if path else message)
        self.path = path
