"""
损失函数 - Losses

窗口化SSIM及其损失 (1 − SSIM)/2、MSE、像素级交叉熵
"""

from dataclasses import dataclass
from typing import Literal, Optional

import torch
import torch.nn.functional as F

from errors import ConfigError, DataError, DimensionError


@dataclass(frozen=True)
class SsimParams:
    """
    SSIM参数

    signed_input=True 时先把 [-1,1] 图像映射到 [0,1] 再计算，
    此时 data_range=1 对应映射后的取值范围
    """
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    window_size: int = 11
    sigma: float = 1.5
    signed_input: bool = True

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigError(f"k1、k2 必须为正: {self.k1}, {self.k2}")
        if self.data_range <= 0:
            raise ConfigError(f"data_range 必须为正: {self.data_range}")
        if self.window_size < 1 or self.sigma <= 0:
            raise ConfigError(f"非法窗口参数: size={self.window_size}, sigma={self.sigma}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def gaussian_window(size: int, sigma: float, dtype=torch.float32, device=None) -> torch.Tensor:
    """归一化的二维高斯窗口 (size, size)"""
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    if x.dim() == 4:
        return x
    raise DimensionError(f"图像应为 (H,W)、(C,H,W) 或 (B,C,H,W)，得到形状 {tuple(x.shape)}")


def effective_window_size(window_size: int, height: int, width: int) -> int:
    """窗口不超过图像，且取奇数"""
    size = min(window_size, height, width)
    if size % 2 == 0:
        size -= 1
    return max(size, 1)


def ssim(x: torch.Tensor, y: torch.Tensor, params: Optional[SsimParams] = None,
         reduction: Literal["mean", "none"] = "mean") -> torch.Tensor:
    """
    窗口化SSIM

    局部统计量用高斯窗口做valid卷积，逐通道计算后在窗口位置和通道上取平均

    Args:
        x, y: 同形状图像
        params: SSIM参数
        reduction: mean 返回标量；none 返回每张图像的值 (B,)
    """
    params = params or SsimParams()
    if x.shape != y.shape:
        raise DimensionError(f"SSIM 输入形状不符: {tuple(x.shape)} vs {tuple(y.shape)}")

    x, y = _as_batch(x), _as_batch(y)
    if params.signed_input:
        x, y = (x + 1.0) / 2.0, (y + 1.0) / 2.0

    channels, height, width = x.shape[1:]
    size = effective_window_size(params.window_size, height, width)
    window = gaussian_window(size, params.sigma, dtype=x.dtype, device=x.device)
    window = window.expand(channels, 1, size, size)

    def filt(z: torch.Tensor) -> torch.Tensor:
        return F.conv2d(z, window, groups=channels)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_xx = filt(x * x) - mu_xx
    sigma_yy = filt(y * y) - mu_yy
    sigma_xy = filt(x * y) - mu_xy

    c1, c2 = params.c1, params.c2
    ssim_map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / ((mu_xx + mu_yy + c1) * (sigma_xx + sigma_yy + c2))

    if reduction == "none":
        return ssim_map.flatten(1).mean(dim=1)
    return ssim_map.mean()


def ssim_loss(x: torch.Tensor, y: torch.Tensor, params: Optional[SsimParams] = None) -> torch.Tensor:
    """(1 − SSIM(x, y)) / 2，取值 [0, 1]"""
    return (1.0 - ssim(x, y, params)) / 2.0


def mse_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """逐元素平方误差的均值"""
    if a.shape != b.shape:
        raise DimensionError(f"MSE 输入形状不符: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean((a - b) ** 2)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                  ignore_label: Optional[int] = None) -> torch.Tensor:
    """
    像素级交叉熵，对未忽略像素取平均

    支持 (N,K) + (N,)、(K,H,W) + (H,W)、(B,K,H,W) + (B,H,W)
    """
    if logits.dim() == 3:
        logits, labels = logits[None], labels[None]
    if logits.dim() not in (2, 4) or labels.dim() != logits.dim() - 1:
        raise DimensionError(f"logits {tuple(logits.shape)} 与 labels {tuple(labels.shape)} 维度不匹配")
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise DimensionError(f"logits {tuple(logits.shape)} 与 labels {tuple(labels.shape)} 形状不符")

    num_classes = logits.shape[1]
    labels = labels.long()
    valid = labels != ignore_label if ignore_label is not None else torch.ones_like(labels, dtype=torch.bool)
    if not bool(valid.any()):
        raise DataError("没有可用于计算交叉熵的像素（全部被忽略）")
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bool(bad.any()):
        raise DataError(f"标签超出 [0, {num_classes})，且不等于 ignore_label={ignore_label}: "
                        f"{torch.unique(labels[bad]).tolist()}")

    return F.cross_entropy(logits, labels, ignore_index=ignore_label if ignore_label is not None else -100)
