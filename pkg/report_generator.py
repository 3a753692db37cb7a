#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
报告生成模块
把评估、消融和鲁棒性结果整理为CSV表格，并打印摘要
"""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger

from utils import format_mean_std

METRICS_COLUMNS = ["run_id", "seed", "dataset", "split", "metric", "value"]
ROBUSTNESS_COLUMNS = ["kind", "severity", "seed", "metric", "value"]
PathLike = Union[str, Path]


class ReportGenerator:
    """CSV报告生成器"""

    def __init__(self, output_dir: PathLike):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def _write(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.output_dir / name
        frame.to_csv(path, index=False)
        logger.info(f"报告已写出 {path} ({len(frame)} 行)")
        return path

    # ------------------------------------------------------------------
    # 分割指标
    # ------------------------------------------------------------------

    @staticmethod
    def metric_rows(run_id: str, seed: int, dataset: str, split: str,
                    scores: Dict[str, float]) -> List[Dict[str, Any]]:
        return [{"run_id": run_id, "seed": seed, "dataset": dataset, "split": split,
                 "metric": metric, "value": float(value)} for metric, value in scores.items()]

    def write_metrics(self, rows: Iterable[Dict[str, Any]], name: str = "metrics.csv") -> Path:
        frame = pd.DataFrame(list(rows), columns=METRICS_COLUMNS)
        return self._write(frame, name)

    @staticmethod
    def summarize(metrics: pd.DataFrame) -> pd.DataFrame:
        """按 (run_id, dataset, split, metric) 聚合各种子：均值、标准差、mean±std（百分制）"""
        keys = ["run_id", "dataset", "split", "metric"]
        grouped = metrics.groupby(keys, sort=False)["value"]
        summary = grouped.agg(mean="mean", std=lambda v: float(np.std(v, ddof=0)), n="count").reset_index()
        summary["formatted"] = [format_mean_std(group.values) for _, group in grouped]
        return summary

    def write_summary(self, metrics: pd.DataFrame, name: str = "summary.csv") -> Path:
        return self._write(self.summarize(metrics), name)

    # ------------------------------------------------------------------
    # 消融
    # ------------------------------------------------------------------

    def write_ablation(self, cells: List[Dict[str, Any]], name: str = "ablation.csv") -> Path:
        """每个网格单元一行；不可行单元保留并写明原因"""
        frame = pd.json_normalize(cells, sep="_")
        for column in ("extract_timesteps",):
            if column in frame:
                frame[column] = frame[column].map(lambda v: "+".join(str(t) for t in v)
                                                  if isinstance(v, (list, tuple)) else v)
        return self._write(frame, name)

    # ------------------------------------------------------------------
    # 鲁棒性
    # ------------------------------------------------------------------

    @staticmethod
    def robustness_by_severity(rows: pd.DataFrame, clean: Optional[Dict[str, float]] = None,
                               metric: str = "iou") -> pd.DataFrame:
        """
        按强度对各退化类型取不加权平均；clean 给出时加入 severity=0 行
        """
        selected = rows[rows["metric"] == metric]
        per_kind = selected.groupby(["severity", "kind"], sort=True)["value"].mean().reset_index()
        by_severity = per_kind.groupby("severity", sort=True)["value"].agg(
            mean="mean", median="median", min="min", max="max").reset_index()
        by_severity.insert(1, "metric", metric)
        if clean is not None:
            value = float(clean[metric])
            clean_row = pd.DataFrame([{"severity": 0, "metric": metric, "mean": value,
                                       "median": value, "min": value, "max": value}])
            by_severity = pd.concat([clean_row, by_severity], ignore_index=True)
        return by_severity

    def write_robustness(self, rows: List[Dict[str, Any]], clean: Optional[Dict[str, float]] = None,
                         metric: str = "iou") -> Dict[str, Path]:
        frame = pd.DataFrame(rows, columns=ROBUSTNESS_COLUMNS)
        return {
            "robustness": self._write(frame, "robustness.csv"),
            "by_severity": self._write(self.robustness_by_severity(frame, clean, metric),
                                       "robustness_by_severity.csv"),
        }

    # ------------------------------------------------------------------
    # 控制台摘要
    # ------------------------------------------------------------------

    @staticmethod
    def print_summary(summary: pd.DataFrame) -> None:
        print("\n📊 评估结果 (mean±std, ×100):")
        for _, row in summary.iterrows():
            print(f"  {row['split']:<9} {row['metric']:<6} {row['formatted']:>14}  (n={row['n']})")


def load_loss_log(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)
