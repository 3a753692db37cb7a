"""
退化过程 - Corruption

两种前向退化：
1. 掩码扩散：按时间步 t 随机遮挡 ⌊t·N/(T+1)⌋ 个 patch（填充为 0，即 [-1,1] 空间的中灰）
2. 高斯扩散：x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε

所有随机操作只依赖传入的 torch.Generator，相同输入和种子得到逐位相同的输出。
图像张量布局为 (C, H, W) 或 (B, C, H, W)。
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
from einops import rearrange

from errors import ConfigError, DimensionError, NumericalDomainError, TimestepRangeError

Timesteps = Union[int, torch.Tensor]


@dataclass(frozen=True)
class PatchGrid:
    """patch 网格：P 同时整除 H 和 W"""
    height: int
    width: int
    patch_size: int

    def __post_init__(self):
        P = self.patch_size
        if P <= 0 or self.height % P or self.width % P:
            raise DimensionError(
                f"patch_size={P} 不能整除图像尺寸 {self.height}×{self.width}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols


@dataclass
class PatchMask:
    """每个 patch 一个布尔值，True = 被遮挡"""
    flags: torch.Tensor
    t: int
    num_timesteps: int

    @property
    def num_masked(self) -> int:
        return int(self.flags.sum().item())

    @property
    def ratio(self) -> float:
        return mask_ratio(self.t, self.num_timesteps)


@dataclass
class DiffusionSchedule:
    """β 调度及其派生量，内部以 float64 保存"""
    betas: torch.Tensor
    kind: str = "linear"

    @property
    def num_timesteps(self) -> int:
        return int(self.betas.shape[0])

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, dim=0)

    def alpha_bar(self, t: Timesteps) -> torch.Tensor:
        """ᾱ_t，t 从 1 开始编号"""
        check_timesteps(t, 1, self.num_timesteps)
        index = torch.as_tensor(t, dtype=torch.long) - 1
        return self.alpha_bars[index]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "DiffusionSchedule":
        return cls(betas=torch.tensor(payload["betas"], dtype=torch.float64), kind=payload.get("kind", "linear"))


# ============================================================================
# 校验
# ============================================================================

def check_timesteps(t: Timesteps, low: int, high: int) -> None:
    """t（标量或张量）必须全部落在 [low, high]"""
    values = torch.as_tensor(t)
    if values.is_floating_point():
        raise TimestepRangeError(f"时间步必须是整数，得到 {values.dtype}")
    if values.numel() == 0:
        return
    t_min, t_max = int(values.min()), int(values.max())
    if t_min < low or t_max > high:
        raise TimestepRangeError(f"时间步超出范围 [{low}, {high}]: min={t_min}, max={t_max}")


# ============================================================================
# patch 化
# ============================================================================

def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """
    (C,H,W) → (N, P²·C)；(B,C,H,W) → (B, N, P²·C)

    patch 按行优先排列，patch 内部按 (p1, p2, c) 展平
    """
    if image.dim() not in (3, 4):
        raise DimensionError(f"图像应为 (C,H,W) 或 (B,C,H,W)，得到形状 {tuple(image.shape)}")
    PatchGrid(image.shape[-2], image.shape[-1], patch_size)
    return rearrange(image, "... c (h p1) (w p2) -> ... (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify(patches: torch.Tensor, height: int, width: int, patch_size: int) -> torch.Tensor:
    """patchify 的逆运算"""
    grid = PatchGrid(height, width, patch_size)
    if patches.dim() not in (2, 3):
        raise DimensionError(f"patches 应为 (N,D) 或 (B,N,D)，得到形状 {tuple(patches.shape)}")
    num, dim = patches.shape[-2], patches.shape[-1]
    if num != grid.num_patches:
        raise DimensionError(f"patch 数量 {num} 与 {height}×{width}/P² = {grid.num_patches} 不符")
    if dim % (patch_size * patch_size):
        raise DimensionError(f"patch 长度 {dim} 不是 P²={patch_size * patch_size} 的整数倍")
    return rearrange(
        patches, "... (h w) (p1 p2 c) -> ... c (h p1) (w p2)",
        h=grid.rows, w=grid.cols, p1=patch_size, p2=patch_size,
    )


# ============================================================================
# 掩码扩散
# ============================================================================

def mask_ratio(t: int, num_timesteps: int) -> float:
    """R_m = t / (T+1)"""
    if num_timesteps < 1:
        raise TimestepRangeError(f"T 至少为 1，得到 {num_timesteps}")
    check_timesteps(t, 0, num_timesteps)
    return t / (num_timesteps + 1)


def num_masked_patches(t: int, num_timesteps: int, num_patches: int) -> int:
    """⌊t·N/(T+1)⌋，纯整数运算"""
    check_timesteps(t, 0, num_timesteps)
    return (int(t) * num_patches) // (num_timesteps + 1)


def _sample_patch_flags(num_patches: int, num_masked: int,
                        generator: Optional[torch.Generator], device: torch.device) -> torch.Tensor:
    """打乱 patch 序号，取末尾 num_masked 个作为遮挡集合"""
    order = torch.randperm(num_patches, generator=generator, device=generator.device if generator else device)
    flags = torch.zeros(num_patches, dtype=torch.bool, device=order.device)
    if num_masked > 0:
        flags[order[num_patches - num_masked:]] = True
    return flags.to(device)


def _flags_to_pixels(flags: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """patch 级标志 → (H, W) 像素级标志"""
    blocks = flags.reshape(grid.rows, grid.cols)
    return blocks.repeat_interleave(grid.patch_size, dim=0).repeat_interleave(grid.patch_size, dim=1)


def mask_image(image: torch.Tensor, t: int, num_timesteps: int, patch_size: int,
               generator: Optional[torch.Generator] = None,
               mask_value: float = 0.0) -> Tuple[torch.Tensor, PatchMask]:
    """
    按时间步遮挡单张图像 (C,H,W)

    被遮挡 patch 填充 mask_value，其余像素与输入逐位相同；
    t=0 时不遮挡任何 patch（但仍消耗一次随机排列，保证随机流位置与 t 无关）
    """
    if image.dim() != 3:
        raise DimensionError(f"mask_image 需要 (C,H,W)，得到形状 {tuple(image.shape)}")
    t = int(t)
    grid = PatchGrid(image.shape[-2], image.shape[-1], patch_size)
    count = num_masked_patches(t, num_timesteps, grid.num_patches)

    flags = _sample_patch_flags(grid.num_patches, count, generator, image.device)
    pixel_mask = _flags_to_pixels(flags, grid)
    fill = torch.full_like(image, mask_value)
    corrupted = torch.where(pixel_mask.unsqueeze(0), fill, image)
    return corrupted, PatchMask(flags=flags, t=t, num_timesteps=num_timesteps)


def mask_batch(images: torch.Tensor, t: torch.Tensor, num_timesteps: int, patch_size: int,
               generator: Optional[torch.Generator] = None,
               mask_value: float = 0.0) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    批量遮挡 (B,C,H,W)，每张图像使用自己的时间步

    Returns:
        (遮挡后的图像, (B, N) 布尔标志)
    """
    if images.dim() != 4:
        raise DimensionError(f"mask_batch 需要 (B,C,H,W)，得到形状 {tuple(images.shape)}")
    t = torch.as_tensor(t).reshape(-1)
    if t.numel() == 1 and images.shape[0] != 1:
        t = t.expand(images.shape[0])
    if t.numel() != images.shape[0]:
        raise DimensionError(f"时间步个数 {t.numel()} 与 batch 大小 {images.shape[0]} 不符")

    outputs, flags = [], []
    for image, t_i in zip(images, t.tolist()):
        corrupted, mask = mask_image(image, t_i, num_timesteps, patch_size, generator, mask_value)
        outputs.append(corrupted)
        flags.append(mask.flags)
    return torch.stack(outputs), torch.stack(flags)


# ============================================================================
# 高斯扩散
# ============================================================================

def make_beta_schedule(num_timesteps: int, kind: str = "linear",
                       beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    """线性 β 调度，β₁..β_T 在端点间均匀插值"""
    if num_timesteps < 1:
        raise TimestepRangeError(f"T 至少为 1，得到 {num_timesteps}")
    if kind != "linear":
        raise ConfigError(f"未知的 β 调度: {kind}（只支持 linear）")
    if not (0 < beta_start < 1 and 0 < beta_end < 1):
        raise ConfigError(f"β 端点必须在 (0,1) 内: {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
    return DiffusionSchedule(betas=betas, kind=kind)


def _broadcast_alpha_bar(schedule: DiffusionSchedule, t: Timesteps, like: torch.Tensor) -> torch.Tensor:
    alpha_bar = schedule.alpha_bar(t).to(device=like.device, dtype=like.dtype)
    if alpha_bar.dim() == 1 and like.dim() == 4:
        alpha_bar = alpha_bar.view(-1, 1, 1, 1)
    return alpha_bar


def diffuse(image: torch.Tensor, t: Timesteps, schedule: DiffusionSchedule,
            generator: Optional[torch.Generator] = None,
            noise: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    闭式前向扩散

    Args:
        image: 干净图像 x₀
        t: 时间步（1..T），batch 输入可传 (B,) 张量
        schedule: β 调度
        generator: 采样 ε 的随机流
        noise: 直接指定 ε（测试注入用），此时不消耗随机流

    Returns:
        (x_t, ε)
    """
    check_timesteps(t, 1, schedule.num_timesteps)
    if noise is None:
        noise = torch.randn(image.shape, generator=generator, dtype=image.dtype,
                            device=generator.device if generator else image.device).to(image.device)
    elif noise.shape != image.shape:
        raise DimensionError(f"噪声形状 {tuple(noise.shape)} 与图像 {tuple(image.shape)} 不符")

    alpha_bar = _broadcast_alpha_bar(schedule, t, image)
    noisy = alpha_bar.sqrt() * image + (1.0 - alpha_bar).sqrt() * noise
    return noisy, noise


def recover_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: Timesteps,
               schedule: DiffusionSchedule, min_alpha_bar: float = 1e-8) -> torch.Tensor:
    """x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t"""
    check_timesteps(t, 1, schedule.num_timesteps)
    if x_t.shape != eps_hat.shape:
        raise DimensionError(f"x_t {tuple(x_t.shape)} 与 ε̂ {tuple(eps_hat.shape)} 形状不符")
    raw = schedule.alpha_bar(t)
    if bool((raw < min_alpha_bar).any()):
        raise NumericalDomainError(f"ᾱ_t={float(raw.min()):.3e} 低于阈值 {min_alpha_bar:.1e}，无法恢复 x₀")
    alpha_bar = _broadcast_alpha_bar(schedule, t, x_t)
    return (x_t - (1.0 - alpha_bar).sqrt() * eps_hat) / alpha_bar.sqrt()
