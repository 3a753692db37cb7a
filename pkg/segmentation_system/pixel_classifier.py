"""
像素分类头

在冻结特征上训练逐像素MLP：每个batch是随机抽取的像素特征向量，Adam优化交叉熵，
平滑后的训练损失在 patience 步内不再创新低即视为收敛。不做数据增强。
"""

import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from loguru import logger
from tqdm import tqdm

from config import SegHeadParams
from diffusion_system.losses import cross_entropy
from errors import ArtifactError, ConfigError, DataError, DimensionError
from utils import atomic_write_bytes, make_generator

from .feature_extractor import FeatureStack

HEAD_FORMAT_VERSION = 1
PREDICT_CHUNK = 65536


class PixelClassifier(nn.Module):
    """逐像素MLP，输入先做按通道标准化"""

    def __init__(self, in_features: int, num_classes: int, hidden_sizes: Sequence[int] = (128, 128)):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"类别数至少为 2，得到 {num_classes}")
        self.in_features = in_features
        self.num_classes = num_classes
        self.register_buffer("feature_mean", torch.zeros(in_features))
        self.register_buffer("feature_std", torch.ones(in_features))

        layers: List[nn.Module] = []
        width = in_features
        for hidden in hidden_sizes:
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, num_classes))
        self.mlp = nn.Sequential(*layers)

    def set_normalization(self, features: torch.Tensor) -> None:
        self.feature_mean.copy_(features.mean(dim=0))
        self.feature_std.copy_(features.std(dim=0, unbiased=False).clamp(min=1e-6))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp((x - self.feature_mean) / self.feature_std)


@dataclass
class SegmentationHead:
    """训练好的分割头及其特征来源"""
    classifier: PixelClassifier
    params: SegHeadParams
    num_classes: int
    provenance: Dict[str, Any] = field(default_factory=dict)
    train_info: Dict[str, Any] = field(default_factory=dict)

    @property
    def in_features(self) -> int:
        return self.classifier.in_features

    @torch.no_grad()
    def predict_logits(self, stack: FeatureStack) -> torch.Tensor:
        """(K, H, W) logits"""
        if stack.num_channels != self.in_features:
            raise DimensionError(f"特征维度 {stack.num_channels} 与分割头输入 {self.in_features} 不符")
        self.classifier.eval()
        pixels = stack.pixels().float()
        logits = torch.cat([self.classifier(chunk) for chunk in pixels.split(PREDICT_CHUNK)])
        return logits.T.reshape(self.num_classes, stack.height, stack.width)

    def predict(self, stack: FeatureStack) -> np.ndarray:
        """逐像素 argmax，并列时取较小的类别号"""
        return logits_to_labels(self.predict_logits(stack))

    def check_provenance(self, checkpoint_id: str, timesteps: Sequence[int], blocks: Sequence[int],
                         clean_input: Optional[bool] = None) -> None:
        expected = {"checkpoint_id": checkpoint_id, "timesteps": [int(t) for t in timesteps],
                    "blocks": sorted(int(b) for b in blocks)}
        if clean_input is not None:
            expected["clean_input"] = bool(clean_input)
        actual = {key: self.provenance.get(key) for key in expected}
        if actual != expected:
            raise ArtifactError(f"分割头的特征来源与当前设置不符: 头={actual}, 当前={expected}")


def logits_to_labels(logits: torch.Tensor) -> np.ndarray:
    # np.argmax 取第一个最大值
    return np.argmax(logits.detach().cpu().numpy(), axis=0).astype(np.int64)


def select_labelled_subset(n: int, fraction: float, seed: int = 0) -> List[int]:
    """按比例抽取标注图像序号（至少1张），结果升序"""
    if not 0 < fraction <= 1:
        raise ConfigError(f"label_fraction 必须在 (0,1] 内，得到 {fraction}")
    if n < 1:
        raise DataError("没有可用的标注图像")
    count = max(1, int(round(n * fraction)))
    if count >= n:
        return list(range(n))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


def fit_pixels(features: torch.Tensor, labels: torch.Tensor, params: SegHeadParams,
               num_classes: int, seed: int = 0) -> SegmentationHead:
    """
    在像素特征 (N, C_f) 和标签 (N,) 上训练分割头

    收敛判据：指数平滑后的损失连续 patience 步未创新低，或达到 max_steps
    """
    features = features.float()
    labels = labels.long()
    if features.dim() != 2 or labels.dim() != 1 or features.shape[0] != labels.shape[0]:
        raise DimensionError(f"特征 {tuple(features.shape)} 与标签 {tuple(labels.shape)} 不匹配")
    if params.ignore_label is not None:
        keep = labels != params.ignore_label
        features, labels = features[keep], labels[keep]
    if labels.numel() == 0:
        raise DataError("没有可用于训练分割头的像素")
    if int(labels.min()) < 0 or int(labels.max()) >= num_classes:
        raise DataError(f"标签超出 [0, {num_classes})")

    counts = torch.bincount(labels, minlength=num_classes)
    absent = [k for k in range(num_classes) if counts[k] == 0]
    if absent:
        logger.warning(f"训练标签中没有类别 {absent}，这些类别仍保留在输出空间中")

    generator = make_generator(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        classifier = PixelClassifier(features.shape[1], num_classes, params.hidden_sizes)
    classifier.set_normalization(features)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=params.learning_rate)

    n_pixels = features.shape[0]
    batch_size = min(params.pixel_batch_size, n_pixels)
    smoothed: Optional[float] = None
    best = float("inf")
    since_best = 0
    step = 0
    classifier.train()
    progress = tqdm(range(params.max_steps), desc="训练分割头", disable=None)
    for step in progress:
        index = torch.randint(0, n_pixels, (batch_size,), generator=generator)
        loss = cross_entropy(classifier(features[index]), labels[index])
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        value = float(loss.detach())
        smoothed = value if smoothed is None else params.smoothing * smoothed + (1 - params.smoothing) * value
        if smoothed < best:
            best, since_best = smoothed, 0
        else:
            since_best += 1
            if since_best >= params.patience:
                break
    steps = step + 1
    converged = since_best >= params.patience

    with torch.no_grad():
        classifier.eval()
        accuracy = float((classifier(features).argmax(dim=1) == labels).float().mean())
    logger.info(f"分割头训练结束: {steps} 步, 平滑损失 {smoothed:.4f}, 训练像素准确率 {accuracy:.4f}"
                f"{'' if converged else '（达到 max_steps）'}")
    return SegmentationHead(
        classifier=classifier, params=params, num_classes=num_classes,
        train_info={"steps": steps, "smoothed_loss": smoothed, "train_accuracy": accuracy,
                    "converged": converged, "n_pixels": n_pixels, "absent_classes": absent},
    )


def train_head(stacks: Sequence[FeatureStack], labels: Sequence[Union[np.ndarray, torch.Tensor]],
               params: SegHeadParams, num_classes: int, seed: int = 0) -> SegmentationHead:
    """在对齐的 (特征, 标签图) 上训练分割头，并记录特征来源"""
    if not stacks or len(stacks) != len(labels):
        raise DataError(f"特征 {len(stacks)} 与标签 {len(labels)} 数量不符或为空")
    pixel_features, pixel_labels = [], []
    for stack, label in zip(stacks, labels):
        label = torch.as_tensor(np.asarray(label)).long()
        if tuple(label.shape) != (stack.height, stack.width):
            raise DimensionError(f"标签形状 {tuple(label.shape)} 与特征空间尺寸 "
                                 f"{(stack.height, stack.width)} 不符")
        pixel_features.append(stack.pixels())
        pixel_labels.append(label.reshape(-1))

    head = fit_pixels(torch.cat(pixel_features), torch.cat(pixel_labels), params, num_classes, seed)
    head.provenance = {**stacks[0].provenance(), "blocks": sorted(stacks[0].blocks)}
    return head


# ============================================================================
# 读写
# ============================================================================

def save_head(path: Union[str, Path], head: SegmentationHead) -> Path:
    payload = {
        "format_version": HEAD_FORMAT_VERSION,
        "state": head.classifier.state_dict(),
        "in_features": head.in_features,
        "num_classes": head.num_classes,
        "params": dataclasses.asdict(head.params),
        "provenance": head.provenance,
        "train_info": head.train_info,
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    return atomic_write_bytes(path, buffer.getvalue())


def load_head(path: Union[str, Path]) -> SegmentationHead:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError("分割头文件不存在", path=str(path))
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise ArtifactError(f"分割头读取失败: {e}", path=str(path)) from e
    if payload.get("format_version") != HEAD_FORMAT_VERSION:
        raise ArtifactError(f"不支持的分割头格式版本: {payload.get('format_version')}", path=str(path))

    params = SegHeadParams(**payload["params"])
    classifier = PixelClassifier(payload["in_features"], payload["num_classes"], params.hidden_sizes)
    classifier.load_state_dict(payload["state"])
    classifier.eval()
    return SegmentationHead(classifier=classifier, params=params, num_classes=payload["num_classes"],
                            provenance=payload["provenance"], train_info=payload.get("train_info", {}))
