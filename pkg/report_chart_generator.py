#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
报告图表生成器
用matplotlib（Agg后端）输出静态PNG：损失曲线、鲁棒性曲线、消融柱状图、重建网格、聚类叠加图
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402

from data_management.image_io import to_uint8  # noqa: E402

PathLike = Union[str, Path]


class ReportChartGenerator:
    """静态图表生成器"""

    def __init__(self, output_dir: PathLike, dpi: int = 150):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.dpi = dpi

    def _save(self, fig, name: str) -> Path:
        path = self.output_dir / name
        fig.savefig(path, dpi=self.dpi, bbox_inches="tight")
        plt.close(fig)
        return path

    def loss_curve(self, loss_log: pd.DataFrame, name: str = "loss_curve.png", window: int = 50) -> Path:
        """原始损失 + 滑动平均"""
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(loss_log["iteration"], loss_log["loss"], alpha=0.3, lw=0.8, label="loss")
        if len(loss_log) >= window:
            ax.plot(loss_log["iteration"], loss_log["loss"].rolling(window).mean(), lw=1.5,
                    label=f"rolling mean ({window})")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        ax.grid(alpha=0.3)
        return self._save(fig, name)

    def robustness_curve(self, by_severity: pd.DataFrame, rows: Optional[pd.DataFrame] = None,
                         name: str = "robustness_curve.png", metric: str = "iou") -> Path:
        """平均指标随退化强度的变化，可叠加各退化类型的细线"""
        fig, ax = plt.subplots(figsize=(7, 4))
        if rows is not None and not rows.empty:
            selected = rows[rows["metric"] == metric]
            for kind, group in selected.groupby("kind"):
                per_severity = group.groupby("severity")["value"].mean()
                ax.plot(per_severity.index, per_severity.values, lw=0.8, alpha=0.5, label=kind)
        ax.plot(by_severity["severity"], by_severity["mean"], "k-o", lw=2, label="mean")
        ax.set_xlabel("severity")
        ax.set_ylabel(metric)
        ax.set_xticks(sorted(by_severity["severity"].unique()))
        ax.legend(fontsize=7, ncol=2)
        ax.grid(alpha=0.3)
        return self._save(fig, name)

    def ablation_bars(self, ablation: pd.DataFrame, metric: str = "dice_mean",
                      name: str = "ablation.png") -> Path:
        """每个可行单元一根柱，误差线为种子间标准差"""
        feasible = ablation[ablation["status"] == "ok"] if "status" in ablation else ablation
        labels = feasible["cell"].tolist()
        values = feasible[metric].to_numpy(dtype=float)
        std_column = metric.replace("_mean", "_std")
        errors = feasible[std_column].to_numpy(dtype=float) if std_column in feasible else None

        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(labels) + 2), 4))
        ax.bar(range(len(labels)), values, yerr=errors, capsize=3, color="steelblue")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel(metric)
        ax.grid(axis="y", alpha=0.3)
        return self._save(fig, name)

    def reconstruction_grid(self, rows: List[Tuple[int, torch.Tensor, torch.Tensor, torch.Tensor]],
                            name: str = "reconstruction.png") -> Path:
        """每行一个 (t, 原图, 遮挡图, 重建图)"""
        fig, axes = plt.subplots(len(rows), 3, figsize=(6, 2 * len(rows)), squeeze=False)
        for i, (t, original, masked, recon) in enumerate(rows):
            for j, (title, image) in enumerate((("original", original), (f"masked t={t}", masked),
                                                ("reconstruction", recon))):
                axes[i, j].imshow(to_uint8(image), cmap="gray" if image.shape[0] == 1 else None)
                axes[i, j].set_title(title, fontsize=8)
                axes[i, j].axis("off")
        return self._save(fig, name)

    def cluster_overlays(self, image: torch.Tensor, clusters: Dict[int, np.ndarray],
                         name: str = "clusters.png", alpha: float = 0.5) -> List[Path]:
        """每个解码块一张叠加图，另输出一张汇总网格"""
        base = to_uint8(image)
        paths = []
        for block, labels in clusters.items():
            fig, ax = plt.subplots(figsize=(3, 3))
            ax.imshow(base, cmap="gray" if base.ndim == 2 else None)
            ax.imshow(labels, cmap="tab10", alpha=alpha, interpolation="nearest")
            ax.set_title(f"block {block}", fontsize=8)
            ax.axis("off")
            paths.append(self._save(fig, f"cluster_block_{block:02d}.png"))

        cols = min(len(clusters), 6)
        rows = int(np.ceil(len(clusters) / cols))
        fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, (block, labels) in zip(axes.ravel(), clusters.items()):
            ax.imshow(labels, cmap="tab10", interpolation="nearest")
            ax.set_title(f"block {block}", fontsize=8)
        paths.append(self._save(fig, name))
        return paths

    def label_maps(self, images: Sequence[torch.Tensor], preds: Sequence[np.ndarray],
                   gts: Sequence[np.ndarray], name: str = "predictions.png", limit: int = 4) -> Path:
        n = min(limit, len(images))
        fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
        for i in range(n):
            axes[i, 0].imshow(to_uint8(images[i]))
            axes[i, 1].imshow(gts[i], cmap="tab10", interpolation="nearest", vmin=0, vmax=9)
            axes[i, 2].imshow(preds[i], cmap="tab10", interpolation="nearest", vmin=0, vmax=9)
            for ax, title in zip(axes[i], ("image", "ground truth", "prediction")):
                ax.set_title(title, fontsize=8)
                ax.axis("off")
        return self._save(fig, name)
