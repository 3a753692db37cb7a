"""
时间条件U-Net

编码-解码结构，跳跃连接；时间步嵌入注入每个残差块（scale-shift归一化），
BigGAN式残差上/下采样，指定分辨率上加自注意力。
解码块（output_blocks）按 0 = 最深 编号，可按块号取出激活作为像素特征。
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from loguru import logger

from config import UNetParams
from errors import ConfigError, DimensionError, TimestepRangeError

Timesteps = Union[int, torch.Tensor]


@dataclass(frozen=True)
class DecoderTap:
    """一个解码块的结构信息"""
    block_index: int
    channels: int
    resolution: int


# ============================================================================
# 基础组件
# ============================================================================

def normalization(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, channels), channels)


def timestep_embedding(t: Timesteps, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """
    正弦时间步嵌入，前一半为 sin，后一半为 cos，频率按几何级数递减

    Args:
        t: 标量或 (B,) 时间步
        dim: 嵌入维度（必须为偶数）

    Returns:
        (B, dim) 嵌入；标量输入时 B=1
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"时间步嵌入维度必须是正偶数，得到 {dim}")
    t = torch.as_tensor(t).reshape(-1).to(torch.float32)
    if bool((t < 0).any()):
        raise TimestepRangeError(f"时间步不能为负: {t.min().item()}")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepBlock(nn.Module):
    """forward 需要时间嵌入的模块"""

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class TimestepEmbedSequential(nn.Sequential, TimestepBlock):
    """按顺序执行，遇到 TimestepBlock 时传入时间嵌入"""

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        for layer in self:
            x = layer(x, emb) if isinstance(layer, TimestepBlock) else layer(x)
        return x


class Upsample(nn.Module):
    def __init__(self, channels: int, use_conv: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1) if use_conv else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Downsample(nn.Module):
    def __init__(self, channels: int, use_conv: bool = True):
        super().__init__()
        self.op = nn.Conv2d(channels, channels, 3, stride=2, padding=1) if use_conv else nn.AvgPool2d(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.op(x)


class ResBlock(TimestepBlock):
    """
    残差块，up/down=True 时在块内完成重采样（BigGAN式）

    use_scale_shift_norm=True 时时间嵌入作为 norm 之后的 (scale, shift)
    """

    def __init__(self, channels: int, emb_channels: int, out_channels: Optional[int] = None,
                 dropout: float = 0.0, use_scale_shift_norm: bool = True,
                 up: bool = False, down: bool = False):
        super().__init__()
        self.out_channels = out_channels or channels
        self.use_scale_shift_norm = use_scale_shift_norm
        self.updown = up or down

        self.in_norm = normalization(channels)
        self.in_conv = nn.Conv2d(channels, self.out_channels, 3, padding=1)

        if up:
            self.h_upd, self.x_upd = Upsample(channels, False), Upsample(channels, False)
        elif down:
            self.h_upd, self.x_upd = Downsample(channels, False), Downsample(channels, False)
        else:
            self.h_upd = self.x_upd = nn.Identity()

        self.emb_layers = nn.Sequential(
            nn.SiLU(),
            nn.Linear(emb_channels, 2 * self.out_channels if use_scale_shift_norm else self.out_channels),
        )
        self.out_norm = normalization(self.out_channels)
        self.out_layers = nn.Sequential(
            nn.SiLU(),
            nn.Dropout(p=dropout),
            nn.Conv2d(self.out_channels, self.out_channels, 3, padding=1),
        )
        if self.out_channels == channels:
            self.skip_connection = nn.Identity()
        else:
            self.skip_connection = nn.Conv2d(channels, self.out_channels, 1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.in_norm(x))
        if self.updown:
            h = self.h_upd(h)
            x = self.x_upd(x)
        h = self.in_conv(h)

        emb_out = self.emb_layers(emb).type(h.dtype)[..., None, None]
        if self.use_scale_shift_norm:
            scale, shift = emb_out.chunk(2, dim=1)
            h = self.out_norm(h) * (1 + scale) + shift
        else:
            h = self.out_norm(h + emb_out)
        h = self.out_layers(h)
        return self.skip_connection(x) + h


class AttentionBlock(nn.Module):
    """空间位置间的多头自注意力"""

    def __init__(self, channels: int, num_heads: int = 4):
        super().__init__()
        if channels % num_heads:
            raise ConfigError(f"通道数 {channels} 不能被注意力头数 {num_heads} 整除")
        self.num_heads = num_heads
        self.norm = normalization(channels)
        self.qkv = nn.Conv1d(channels, channels * 3, 1)
        self.proj_out = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, height, width = x.shape
        qkv = self.qkv(self.norm(x).reshape(b, c, -1))
        q, k, v = rearrange(qkv, "b (three heads d) n -> three (b heads) d n", three=3, heads=self.num_heads)
        scale = 1.0 / math.sqrt(math.sqrt(q.shape[1]))
        weight = torch.einsum("bct,bcs->bts", q * scale, k * scale).softmax(dim=-1)
        out = torch.einsum("bts,bcs->bct", weight, v)
        out = rearrange(out, "(b heads) d n -> b (heads d) n", heads=self.num_heads)
        return x + self.proj_out(out).reshape(b, c, height, width)


# ============================================================================
# U-Net
# ============================================================================

class UNetModel(nn.Module):
    """
    时间条件U-Net

    输入 (B,C,H,W) 与时间步 t，输出同形状图像（x̂₀ 或 ε̂）。
    architecture_table 记录每个解码块的通道数和分辨率。
    """

    def __init__(self, params: UNetParams, num_timesteps: Optional[int] = None):
        super().__init__()
        self.params = params
        self.num_timesteps = num_timesteps
        self.image_size = params.image_size
        self.in_channels = params.in_channels
        self.out_channels = params.out_channels or params.in_channels
        self.model_channels = params.base_width

        levels = len(params.channel_mult)
        if params.image_size % (2 ** (levels - 1)):
            raise ConfigError(f"image_size={params.image_size} 不能被 2^{levels - 1} 整除")
        available = {params.image_size // 2 ** level for level in range(levels)}
        missing = sorted(set(params.attention_resolutions) - available)
        if missing:
            raise ConfigError(f"注意力分辨率 {missing} 不在下采样路径产生的分辨率 {sorted(available)} 中")
        if self.out_channels != self.in_channels:
            raise ConfigError(f"out_channels={self.out_channels} 必须等于 in_channels={self.in_channels}")

        attention = set(params.attention_resolutions)
        base = params.base_width
        emb_dim = params.time_embed_dim or base * 4
        block_kwargs = dict(emb_channels=emb_dim, dropout=params.dropout,
                            use_scale_shift_norm=params.use_scale_shift_norm)

        self.time_embed = nn.Sequential(
            nn.Linear(base, emb_dim),
            nn.SiLU(),
            nn.Linear(emb_dim, emb_dim),
        )

        # 编码路径
        ch = base * params.channel_mult[0]
        resolution = params.image_size
        self.input_blocks = nn.ModuleList([TimestepEmbedSequential(nn.Conv2d(self.in_channels, ch, 3, padding=1))])
        skip_channels = [ch]
        for level, mult in enumerate(params.channel_mult):
            for _ in range(params.num_res_blocks):
                layers: List[nn.Module] = [ResBlock(ch, out_channels=base * mult, **block_kwargs)]
                ch = base * mult
                if resolution in attention:
                    layers.append(AttentionBlock(ch, params.num_heads))
                self.input_blocks.append(TimestepEmbedSequential(*layers))
                skip_channels.append(ch)
            if level != levels - 1:
                if params.resblock_updown:
                    down = ResBlock(ch, out_channels=ch, down=True, **block_kwargs)
                else:
                    down = Downsample(ch)
                self.input_blocks.append(TimestepEmbedSequential(down))
                skip_channels.append(ch)
                resolution //= 2

        # 中间块
        self.middle_block = TimestepEmbedSequential(
            ResBlock(ch, **block_kwargs),
            AttentionBlock(ch, params.num_heads),
            ResBlock(ch, **block_kwargs),
        )

        # 解码路径
        self.output_blocks = nn.ModuleList()
        table: List[DecoderTap] = []
        for level, mult in list(enumerate(params.channel_mult))[::-1]:
            for i in range(params.num_res_blocks + 1):
                layers = [ResBlock(ch + skip_channels.pop(), out_channels=base * mult, **block_kwargs)]
                ch = base * mult
                if resolution in attention:
                    layers.append(AttentionBlock(ch, params.num_heads))
                if level and i == params.num_res_blocks:
                    if params.resblock_updown:
                        layers.append(ResBlock(ch, out_channels=ch, up=True, **block_kwargs))
                    else:
                        layers.append(Upsample(ch))
                    resolution *= 2
                self.output_blocks.append(TimestepEmbedSequential(*layers))
                table.append(DecoderTap(block_index=len(table), channels=ch, resolution=resolution))

        self.out = nn.Sequential(
            normalization(ch),
            nn.SiLU(),
            nn.Conv2d(ch, self.out_channels, 3, padding=1),
        )
        self.architecture_table: List[DecoderTap] = table

    @property
    def num_decoder_blocks(self) -> int:
        return len(self.output_blocks)

    def _check_inputs(self, x: torch.Tensor, t: Timesteps) -> torch.Tensor:
        expected = (self.in_channels, self.image_size, self.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"输入形状应为 (B, {expected[0]}, {expected[1]}, {expected[2]})，"
                                 f"得到 {tuple(x.shape)}")
        t = torch.as_tensor(t, device=x.device).reshape(-1)
        if t.is_floating_point():
            raise TimestepRangeError(f"时间步必须是整数，得到 {t.dtype}")
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        if t.numel() != x.shape[0]:
            raise DimensionError(f"时间步个数 {t.numel()} 与 batch 大小 {x.shape[0]} 不符")
        high = self.num_timesteps if self.num_timesteps is not None else float("inf")
        if bool((t < 0).any()) or bool((t > high).any()):
            raise TimestepRangeError(f"时间步超出范围 [0, {self.num_timesteps}]")
        return t

    def validate_taps(self, taps: Iterable[int]) -> List[int]:
        """去重并升序；越界抛 TimestepRangeError"""
        taps = sorted({int(b) for b in taps})
        bad = [b for b in taps if not 0 <= b < self.num_decoder_blocks]
        if bad:
            raise TimestepRangeError(f"解码块编号 {bad} 超出 [0, {self.num_decoder_blocks})")
        return taps

    def _run(self, x: torch.Tensor, t: Timesteps,
             taps: Sequence[int]) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
        t = self._check_inputs(x, t)
        emb = self.time_embed(timestep_embedding(t, self.model_channels).to(x.dtype))

        hs = []
        h = x
        for module in self.input_blocks:
            h = module(h, emb)
            hs.append(h)
        h = self.middle_block(h, emb)

        wanted = set(taps)
        activations: Dict[int, torch.Tensor] = {}
        for index, module in enumerate(self.output_blocks):
            h = module(torch.cat([h, hs.pop()], dim=1), emb)
            if index in wanted:
                activations[index] = h
        return self.out(h), activations

    def forward(self, x: torch.Tensor, t: Timesteps) -> torch.Tensor:
        prediction, _ = self._run(x, t, ())
        return prediction

    def forward_with_activations(self, x: torch.Tensor, t: Timesteps,
                                 taps: Iterable[int]) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
        """预测 + 指定解码块的输出激活（原生分辨率和通道数）"""
        return self._run(x, t, self.validate_taps(taps))


def build_unet(params: UNetParams, seed: int = 0, num_timesteps: Optional[int] = None) -> UNetModel:
    """按种子确定性地构建U-Net，不影响全局随机状态"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNetModel(params, num_timesteps=num_timesteps)

    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"U-Net 构建完成: {params.image_size}px, 宽度 {params.base_width}, "
                f"倍率 {params.channel_mult}, 参数量 {n_params / 1e6:.2f}M, 解码块 {model.num_decoder_blocks}")
    for tap in model.architecture_table:
        logger.debug(f"  解码块 {tap.block_index:>2}: {tap.channels} 通道 @ {tap.resolution}×{tap.resolution}")
    return model


def remap_block_indices(blocks: Iterable[int], target_count: int, reference_count: int = 18) -> List[int]:
    """
    把按 reference_count 个解码块编号的块号按比例映射到 target_count 个块

    floor(b · target / reference)，去重后升序
    """
    blocks = list(blocks)
    bad = [b for b in blocks if not 0 <= b < reference_count]
    if bad:
        raise TimestepRangeError(f"块编号 {bad} 超出 [0, {reference_count})")
    if target_count == reference_count:
        return sorted(set(blocks))
    return sorted({(b * target_count) // reference_count for b in blocks})
