"""
自监督预训练 - DiffusionPretrainer

MDM：按时间步遮挡 patch，重建 x₀，SSIM（或消融用 MSE）损失
DDPM：高斯加噪，预测 ε（MSE）或 x₀（MSE / SSIM 变体）
fixed_t 把两者退化为固定退化强度的自编码器

训练只做随机水平翻转（图像大于模型输入时先随机裁剪）；
所有随机性来自一个 torch.Generator，其状态随检查点保存，续训逐位一致。
"""

import math
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd
import torch
from loguru import logger
from tqdm import tqdm

from config import DiffusionParams, PretrainParams, RunConfig
from data_management.augmentations import random_crop, random_flip
from errors import DataError, TimestepRangeError, TrainingDivergenceError
from utils import make_generator

from . import corruption
from .checkpoint import load_checkpoint, save_checkpoint, schedule_from_params
from .losses import SsimParams, mse_loss, ssim_loss
from .unet import UNetModel, build_unet

LOSS_LOG_NAME = "loss_log.csv"
FINAL_CHECKPOINT_NAME = "model.pt"


def sample_timesteps(batch_size: int, num_timesteps: int,
                     generator: Optional[torch.Generator] = None,
                     fixed_t: Optional[int] = None) -> torch.Tensor:
    """在 {1..T} 上均匀采样，设置 fixed_t 时全部取 fixed_t"""
    if num_timesteps < 1:
        raise TimestepRangeError(f"T 至少为 1，得到 {num_timesteps}")
    if fixed_t is not None:
        if not 1 <= fixed_t <= num_timesteps:
            raise TimestepRangeError(f"fixed_t={fixed_t} 超出范围 [1, {num_timesteps}]")
        return torch.full((batch_size,), int(fixed_t), dtype=torch.long)
    return torch.randint(1, num_timesteps + 1, (batch_size,), generator=generator, dtype=torch.long)


class DiffusionPretrainer:
    """预训练器：持有模型、优化器、随机流和损失历史"""

    def __init__(self, model: UNetModel, diffusion: DiffusionParams, params: PretrainParams,
                 seed: int = 0, device: Union[str, torch.device] = "cpu",
                 flip_prob: float = 0.5):
        params.check(diffusion.num_timesteps)
        self.model = model.to(device)
        self.diffusion = diffusion
        self.params = params
        self.device = torch.device(device)
        self.flip_prob = flip_prob

        self.schedule = schedule_from_params(diffusion)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=params.learning_rate)
        self.generator = make_generator(seed)
        self.ssim_params = SsimParams(window_size=params.ssim_window, sigma=params.ssim_sigma,
                                      signed_input=True)

        self.iteration = 0
        self.loss_history: List[Dict[str, float]] = []
        self.nonfinite_streak = 0
        self.last_finite_loss: Optional[float] = None
        self._elapsed_offset = 0.0
        self._clock_start = time.perf_counter()

    # ------------------------------------------------------------------
    # 单步
    # ------------------------------------------------------------------

    def sample_timesteps(self, batch_size: int) -> torch.Tensor:
        return sample_timesteps(batch_size, self.diffusion.num_timesteps, self.generator, self.params.fixed_t)

    def sample_batch(self, dataset: torch.Tensor) -> torch.Tensor:
        """从数据集中有放回抽取一个batch，并做裁剪/翻转增强"""
        index = torch.randint(0, dataset.shape[0], (self.params.batch_size,), generator=self.generator)
        size = self.model.image_size
        images = []
        for i in index.tolist():
            image = dataset[i]
            if image.shape[-1] != size or image.shape[-2] != size:
                image, _ = random_crop(image, None, size=size, generator=self.generator)
            image, _ = random_flip(image, None, generator=self.generator, p=self.flip_prob)
            images.append(image)
        return torch.stack(images).to(self.device)

    def _reconstruction_loss(self, prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if self.params.loss == "ssim":
            return ssim_loss(target, prediction, self.ssim_params)
        return mse_loss(prediction, target)

    def train_step_mdm(self, x0: torch.Tensor) -> float:
        """遮挡 → 重建 x₀ → 损失 → 一次参数更新"""
        self.model.train()
        t = self.sample_timesteps(x0.shape[0])
        x_t, _ = corruption.mask_batch(x0.cpu(), t, self.diffusion.num_timesteps, self.diffusion.patch_size,
                                       self.generator, self.diffusion.mask_value)
        prediction = self.model(x_t.to(self.device), t.to(self.device))
        loss = self._reconstruction_loss(prediction, x0)
        return self._finish_step(loss, t)

    def train_step_ddpm(self, x0: torch.Tensor, noise: Optional[torch.Tensor] = None) -> float:
        """加噪 → 预测 ε 或 x₀ → 损失 → 一次参数更新"""
        self.model.train()
        t = self.sample_timesteps(x0.shape[0])
        if noise is None:
            noise = torch.randn(x0.shape, generator=self.generator, dtype=x0.dtype)
        x_t, eps = corruption.diffuse(x0, t.to(x0.device), self.schedule, noise=noise.to(x0.device))
        prediction = self.model(x_t, t.to(self.device))
        if self.params.target == "noise":
            loss = mse_loss(prediction, eps)
        else:
            loss = self._reconstruction_loss(prediction, x0)
        return self._finish_step(loss, t)

    def train_step(self, x0: torch.Tensor) -> float:
        if self.params.method == "mdm":
            return self.train_step_mdm(x0)
        return self.train_step_ddpm(x0)

    def _finish_step(self, loss: torch.Tensor, t: torch.Tensor) -> float:
        """非有限损失跳过更新，连续 divergence_patience 次后终止训练"""
        self.iteration += 1
        value = float(loss.detach())
        self.optimizer.zero_grad(set_to_none=True)

        if not math.isfinite(value):
            self.nonfinite_streak += 1
            logger.warning(f"第 {self.iteration} 步损失非有限 ({value})，跳过更新 "
                           f"[{self.nonfinite_streak}/{self.params.divergence_patience}]")
            if self.nonfinite_streak >= self.params.divergence_patience:
                raise TrainingDivergenceError(
                    f"连续 {self.nonfinite_streak} 步损失非有限，训练终止",
                    diagnostics={
                        "iteration": self.iteration,
                        "consecutive_nonfinite": self.nonfinite_streak,
                        "last_finite_loss": self.last_finite_loss,
                        "last_timesteps": t.tolist(),
                        "method": self.params.method,
                        "loss": self.params.loss,
                        "learning_rate": self.params.learning_rate,
                    },
                )
            return value

        loss.backward()
        self.optimizer.step()
        self.nonfinite_streak = 0
        self.last_finite_loss = value
        return value

    # ------------------------------------------------------------------
    # 状态
    # ------------------------------------------------------------------

    def elapsed(self) -> float:
        return self._elapsed_offset + (time.perf_counter() - self._clock_start)

    def training_state(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "optimizer_state": self.optimizer.state_dict(),
            "generator_state": self.generator.get_state(),
            "loss_history": list(self.loss_history),
            "elapsed": self.elapsed(),
            "nonfinite_streak": self.nonfinite_streak,
            "pretrain_params": {k: getattr(self.params, k) for k in self.params.__dataclass_fields__},
        }

    def load_training_state(self, state: Dict[str, Any]) -> None:
        self.iteration = int(state["iteration"])
        self.optimizer.load_state_dict(state["optimizer_state"])
        self.generator.set_state(state["generator_state"])
        self.loss_history = list(state.get("loss_history", []))
        self.nonfinite_streak = int(state.get("nonfinite_streak", 0))
        self._elapsed_offset = float(state.get("elapsed", 0.0))
        self._clock_start = time.perf_counter()

    def save(self, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
        return save_checkpoint(path, self.model, self.diffusion, self.schedule,
                               training_state=self.training_state(), metadata=metadata)

    def resume(self, path: Union[str, Path]) -> None:
        """从检查点恢复模型和训练状态"""
        payload = load_checkpoint(path, map_location=self.device)
        self.model.load_state_dict(payload["model_state"])
        state = payload.get("training_state")
        if state is None:
            raise DataError(f"检查点 {path} 不含训练状态，无法续训")
        self.load_training_state(state)
        logger.info(f"已从 {path} 恢复，迭代 {self.iteration}")

    def write_loss_log(self, output_dir: Union[str, Path]) -> Path:
        path = Path(output_dir) / LOSS_LOG_NAME
        frame = pd.DataFrame(self.loss_history, columns=["iteration", "loss", "wall_time"])
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return path

    # ------------------------------------------------------------------
    # 训练循环
    # ------------------------------------------------------------------

    def fit(self, dataset: torch.Tensor, iterations: int, output_dir: Union[str, Path],
            metadata: Optional[Dict[str, Any]] = None) -> Path:
        """训练到第 iterations 步（续训时从当前迭代继续），返回最终检查点路径"""
        if dataset.shape[0] == 0:
            raise DataError("预训练数据集为空")
        output_dir = Path(output_dir)
        checkpoint_dir = output_dir / "checkpoints"
        every = self.params.checkpoint_every

        logger.info(f"开始预训练: method={self.params.method}, loss={self.params.loss}, "
                    f"target={self.params.target}, fixed_t={self.params.fixed_t}, "
                    f"迭代 {self.iteration}→{iterations}, batch {self.params.batch_size}")

        progress = tqdm(range(self.iteration, iterations), desc="预训练", disable=None)
        for _ in progress:
            batch = self.sample_batch(dataset)
            loss = self.train_step(batch)
            self.loss_history.append({"iteration": self.iteration, "loss": loss, "wall_time": self.elapsed()})

            if self.iteration % self.params.log_every == 0:
                logger.info(f"迭代 {self.iteration}/{iterations}  loss={loss:.6f}  用时 {self.elapsed():.1f}s")
            if self.iteration % every == 0 and self.iteration < iterations:
                self.save(checkpoint_dir / f"ckpt_{self.iteration:07d}.pt", metadata)
                self.write_loss_log(output_dir)

        final = self.save(output_dir / FINAL_CHECKPOINT_NAME, metadata)
        self.write_loss_log(output_dir)
        logger.info(f"预训练完成: {self.iteration} 步，检查点 {final}")
        return final


def pretrain(config: RunConfig, dataset: torch.Tensor, output_dir: Union[str, Path],
             resume_from: Optional[Union[str, Path]] = None) -> Path:
    """
    按配置预训练并返回最终检查点路径

    iterations=0 时检查点即为初始化参数
    """
    if dataset.numel() == 0 or dataset.shape[0] == 0:
        raise DataError("预训练数据集为空")
    diffusion = config.diffusion
    model = build_unet(config.unet, seed=config.seed, num_timesteps=diffusion.num_timesteps)
    trainer = DiffusionPretrainer(model, diffusion, config.pretrain, seed=config.seed,
                                  device=config.device, flip_prob=config.data.flip_prob)
    if resume_from:
        trainer.resume(resume_from)
    metadata = {"run_name": config.run_name, "seed": config.seed, "method": config.pretrain.method,
                "loss": config.pretrain.loss, "target": config.pretrain.target,
                "fixed_t": config.pretrain.fixed_t}
    return trainer.fit(dataset, config.pretrain.iterations, output_dir, metadata)


@torch.no_grad()
def reconstruct(model: UNetModel, image: torch.Tensor, t: int, num_timesteps: int, patch_size: int,
                generator: Optional[torch.Generator] = None,
                mask_value: float = 0.0) -> Tuple[torch.Tensor, torch.Tensor]:
    """单张图像 (C,H,W) 遮挡后一次前向重建，返回 (遮挡图, 重建图)"""
    model.eval()
    masked, _ = corruption.mask_image(image.cpu(), t, num_timesteps, patch_size, generator, mask_value)
    device = next(model.parameters()).device
    recon = model(masked[None].to(device), t)[0].cpu()
    return masked, recon
