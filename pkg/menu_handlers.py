#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
子命令处理函数模块
每个 cmd_* 对应一个子命令：准备运行目录、冻结配置、执行流水线、写出CSV和图表
"""

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed
from loguru import logger

from config import (
    ConfigManager,
    RunConfig,
    build_run_config,
    config_to_dict,
    infeasible_reason,
)
from data_management import (
    DatasetManifest,
    corrupt_test,
    load_manifest,
    open_dataset,
    write_image,
    write_label,
    write_synthetic_dataset,
)
from diffusion_system import load_model, pretrain, reconstruct
from diffusion_system import corruption
from diffusion_system.pretrainer import FINAL_CHECKPOINT_NAME, LOSS_LOG_NAME
from errors import ArtifactError
from report_chart_generator import ReportChartGenerator
from report_generator import ReportGenerator, load_loss_log
from segmentation_system import (
    FeatureCacheManager,
    FeatureExtractor,
    SegmentationHead,
    cluster_blocks,
    create_extractor,
    evaluate_label_maps,
    load_head,
    predict_sliding,
    save_head,
    select_labelled_subset,
    tile_pairs,
    train_head,
)
from utils import derive_seed, make_generator, seed_everything, setup_logger

PathLike = Union[str, Path]
EVAL_METRICS = ("dice", "iou", "miou", "aji")


# ============================================================================
# 公共准备
# ============================================================================

def prepare_run(manager: ConfigManager, command: str, run_dir: Optional[PathLike] = None) -> Tuple[RunConfig, Path]:
    """校验配置、建立运行目录、初始化日志与种子并冻结配置"""
    config = manager.validate_config()
    run_dir = Path(run_dir) if run_dir is not None else manager.run_directory(command)
    run_dir.mkdir(parents=True, exist_ok=True)
    setup_logger(run_dir, config.log_level)
    seed_everything(config.seed, config.deterministic)
    manager.save_resolved_config(run_dir, command)
    logger.info(f"运行 {command}: {config.run_name}, 输出 {run_dir}")
    return config, run_dir


def default_checkpoint(manager: ConfigManager) -> Path:
    return manager.run_directory("pretrain") / FINAL_CHECKPOINT_NAME


def _require_file(path: PathLike, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"{what}不存在", path=str(path))
    return path


def load_pretrain_images(manifest: DatasetManifest) -> torch.Tensor:
    with manifest.use_stage("pretrain"):
        return manifest.stacked_images("pretrain")


# ============================================================================
# 分割头训练与评估
# ============================================================================

@dataclass
class SegmentationRun:
    head: SegmentationHead
    scores: Dict[str, float]
    predictions: List[np.ndarray]
    labels: List[np.ndarray]
    images: List[torch.Tensor]


def _tile_id(image_id: str, origin: Tuple[int, int], single: bool) -> str:
    return image_id if single else f"{image_id}@{origin[0]},{origin[1]}"


def fit_head(config: RunConfig, extractor: FeatureExtractor, manifest: DatasetManifest,
             seed: int, cache: Optional[FeatureCacheManager] = None) -> SegmentationHead:
    """在 seg_train（按 label_fraction 抽样）上训练分割头，训练阶段不能读取测试划分"""
    timesteps = config.features.timesteps
    blocks = extractor.resolve_blocks(config.features.blocks, config.features.block_reference_count)
    window = extractor.model.image_size

    with manifest.use_stage("train_head"):
        ids = manifest.image_ids("seg_train")
        subset = select_labelled_subset(len(ids), config.seghead.label_fraction, seed)
        images, labels = manifest.load_pairs("seg_train", subset)
    ids = [ids[i] for i in subset]
    logger.info(f"分割头训练图像 {len(subset)} 张 (label_fraction={config.seghead.label_fraction})")

    stacks, tile_labels = [], []
    for image, label, image_id in zip(images, labels, ids):
        tiles = tile_pairs(image, label, window, config.seghead.pad_mode)
        for tile, tile_label, origin in tiles:
            tile_key = _tile_id(image_id, origin, len(tiles) == 1)
            stacks.extend(extractor.extract_many([tile], timesteps, blocks, [tile_key], cache))
            tile_labels.append(tile_label)

    head = train_head(stacks, tile_labels, config.seghead, manifest.num_classes, seed)
    head.provenance["clean_input"] = extractor.clean_input
    head.train_info.update({"seed": seed, "labelled_images": ids})
    return head


def evaluate_head(config: RunConfig, extractor: FeatureExtractor, head: SegmentationHead,
                  images: Sequence[torch.Tensor], labels: Sequence[np.ndarray], ids: Sequence[str],
                  num_classes: int,
                  corrupt: Optional[Callable[[torch.Tensor, str], torch.Tensor]] = None
                  ) -> Tuple[Dict[str, float], List[np.ndarray]]:
    """滑窗推理并计算指标；corrupt 给出时先对图像施加退化"""
    blocks = extractor.resolve_blocks(config.features.blocks, config.features.block_reference_count)
    head.check_provenance(extractor.checkpoint_id, config.features.timesteps, blocks, extractor.clean_input)
    predictions = []
    for image, image_id in zip(images, ids):
        source = corrupt(image, image_id) if corrupt is not None else image
        predictions.append(predict_sliding(
            extractor, head, source, config.features.timesteps, blocks,
            window=extractor.model.image_size, stitch=config.seghead.stitch,
            pad_mode=config.seghead.pad_mode, image_id=image_id,
        ))
    scores = evaluate_label_maps(predictions, labels, num_classes, config.metrics.connectivity,
                                 config.seghead.ignore_label)
    return scores, predictions


def load_test_split(manifest: DatasetManifest) -> Tuple[List[torch.Tensor], List[np.ndarray], List[str]]:
    with manifest.use_stage("evaluate"):
        images, labels = manifest.load_pairs("seg_test")
        ids = manifest.image_ids("seg_test")
    return images, labels, ids


def train_and_evaluate(config: RunConfig, checkpoint: PathLike, manifest: DatasetManifest, seed: int,
                       test_split: Optional[Tuple[List[torch.Tensor], List[np.ndarray], List[str]]] = None
                       ) -> SegmentationRun:
    extractor, cache = create_extractor(config, checkpoint, seed)
    head = fit_head(config, extractor, manifest, seed, cache)
    images, labels, ids = test_split or load_test_split(manifest)
    scores, predictions = evaluate_head(config, extractor, head, images, labels, ids, manifest.num_classes)
    return SegmentationRun(head=head, scores=scores, predictions=predictions, labels=labels, images=images)


# ============================================================================
# 子命令
# ============================================================================

def cmd_synth_data(manager: ConfigManager) -> Path:
    """生成合成形状数据集"""
    config, run_dir = prepare_run(manager, "synth-data")
    print(f"\n🧪 生成合成数据集: {config.synth.n_images} 张 {config.synth.image_size}×{config.synth.image_size}")
    path = write_synthetic_dataset(config.synth.output_dir, config.synth, seed=config.seed)
    print(f"✅ 数据清单: {path}")
    print(f"💡 使用: --set data.manifest={path}")
    return path


def cmd_pretrain(manager: ConfigManager, resume_from: Optional[PathLike] = None) -> Path:
    """自监督预训练，输出检查点、损失日志和损失曲线"""
    config, run_dir = prepare_run(manager, "pretrain")
    manifest = open_dataset(config)
    dataset = load_pretrain_images(manifest)
    print(f"\n🧠 预训练 {config.pretrain.method.upper()} (loss={config.pretrain.loss}, "
          f"target={config.pretrain.target}, fixed_t={config.pretrain.fixed_t})")
    print(f"   数据: {dataset.shape[0]} 张, 迭代 {config.pretrain.iterations}, batch {config.pretrain.batch_size}")

    checkpoint = pretrain(config, dataset, run_dir, resume_from=resume_from)
    loss_log = load_loss_log(run_dir / LOSS_LOG_NAME)
    if not loss_log.empty:
        ReportChartGenerator(run_dir).loss_curve(loss_log)
    print(f"✅ 检查点: {checkpoint}")
    return checkpoint


def cmd_train_seg(manager: ConfigManager, checkpoint: Optional[PathLike] = None) -> Dict[str, Any]:
    """逐种子训练分割头并在测试集上评估，输出 metrics.csv / summary.csv"""
    config, run_dir = prepare_run(manager, "train-seg")
    checkpoint = _require_file(checkpoint or default_checkpoint(manager), "检查点")
    manifest = open_dataset(config)
    test_split = load_test_split(manifest)
    reporter = ReportGenerator(run_dir)

    print(f"\n🎯 分割头训练: 种子 {config.metrics.seeds}, 时间步 {config.features.timesteps}, "
          f"解码块 {config.features.blocks}")
    rows, last_run = [], None
    for seed in config.metrics.seeds:
        run = train_and_evaluate(config, checkpoint, manifest, seed, test_split)
        save_head(run_dir / "heads" / f"head_seed{seed}.pt", run.head)
        rows.extend(reporter.metric_rows(config.run_name, seed, config.metrics.dataset_name, "seg_test", run.scores))
        print(f"   种子 {seed}: " + "  ".join(f"{m}={run.scores[m]:.4f}" for m in EVAL_METRICS))
        last_run = run

    metrics_path = reporter.write_metrics(rows)
    metrics = pd.DataFrame(rows)
    summary_path = reporter.write_summary(metrics)
    reporter.print_summary(reporter.summarize(metrics))
    ReportChartGenerator(run_dir).label_maps(last_run.images, last_run.predictions, last_run.labels)
    return {"metrics": metrics_path, "summary": summary_path, "run_dir": run_dir}


def cmd_eval(manager: ConfigManager, checkpoint: Optional[PathLike] = None,
             head_path: Optional[PathLike] = None) -> Dict[str, Any]:
    """用已保存的分割头重新评估测试集（检查特征来源一致）"""
    config, run_dir = prepare_run(manager, "eval")
    checkpoint = _require_file(checkpoint or default_checkpoint(manager), "检查点")
    head_path = _require_file(head_path or manager.run_directory("train-seg") / "heads" /
                              f"head_seed{config.seed}.pt", "分割头")
    manifest = open_dataset(config)
    head = load_head(head_path)
    seed = int(head.train_info.get("seed", config.seed))
    extractor, _ = create_extractor(config, checkpoint, seed)

    images, labels, ids = load_test_split(manifest)
    scores, _ = evaluate_head(config, extractor, head, images, labels, ids, manifest.num_classes)
    reporter = ReportGenerator(run_dir)
    path = reporter.write_metrics(reporter.metric_rows(config.run_name, seed, config.metrics.dataset_name,
                                                       "seg_test", scores))
    print("\n📊 " + "  ".join(f"{m}={scores[m]:.4f}" for m in EVAL_METRICS))
    return {"metrics": path, "scores": scores}


def cmd_robustness(manager: ConfigManager, checkpoint: Optional[PathLike] = None,
                   head_path: Optional[PathLike] = None) -> Dict[str, Any]:
    """逐 (退化类型, 强度) 评估，按强度平均，含 severity=0 的干净结果"""
    config, run_dir = prepare_run(manager, "robustness")
    checkpoint = _require_file(checkpoint or default_checkpoint(manager), "检查点")
    manifest = open_dataset(config)

    if head_path is not None:
        head = load_head(_require_file(head_path, "分割头"))
        seed = int(head.train_info.get("seed", config.seed))
        extractor, _ = create_extractor(config, checkpoint, seed)
    else:
        seed = config.seed
        extractor, _ = create_extractor(config, checkpoint, seed)
        head = fit_head(config, extractor, manifest, seed)
        save_head(run_dir / f"head_seed{seed}.pt", head)

    images, labels, ids = load_test_split(manifest)
    clean, _ = evaluate_head(config, extractor, head, images, labels, ids, manifest.num_classes)
    print(f"\n🛡️  鲁棒性评估: 干净 IoU={clean['iou']:.4f}")

    rows = []
    cells = list(itertools.product(config.robustness.kinds, config.robustness.severities))
    for kind, severity in cells:
        def corrupt(image: torch.Tensor, image_id: str, kind=kind, severity=severity) -> torch.Tensor:
            generator = make_generator(derive_seed(seed, kind, severity, image_id))
            return corrupt_test(image, kind, severity, generator)

        scores, _ = evaluate_head(config, extractor, head, images, labels, ids, manifest.num_classes, corrupt)
        rows.extend({"kind": kind, "severity": severity, "seed": seed, "metric": m, "value": v}
                    for m, v in scores.items())
        logger.info(f"{kind} severity={severity}: iou={scores['iou']:.4f}")

    reporter = ReportGenerator(run_dir)
    paths = reporter.write_robustness(rows, clean)
    frame = pd.DataFrame(rows)
    by_severity = reporter.robustness_by_severity(frame, clean)
    ReportChartGenerator(run_dir).robustness_curve(by_severity, frame)
    for _, row in by_severity.iterrows():
        print(f"   强度 {int(row['severity'])}: 平均 IoU {row['mean']:.4f}  中位数 {row['median']:.4f}")
    return {**paths, "clean": clean, "rows": len(cells)}


def cmd_reconstruct(manager: ConfigManager, checkpoint: Optional[PathLike] = None) -> Path:
    """不同退化强度下的单步重建预览"""
    config, run_dir = prepare_run(manager, "reconstruct")
    checkpoint = _require_file(checkpoint or default_checkpoint(manager), "检查点")
    model, diffusion, schedule, payload = load_model(checkpoint, map_location=config.device)
    metadata = payload.get("metadata") or {}
    method = metadata.get("method", "mdm")
    manifest = open_dataset(config)
    split = config.reconstruct.split
    with manifest.use_stage("reconstruct"):
        count = min(config.reconstruct.num_images, len(manifest.entries(split)))
        images = manifest.load_images(split, list(range(count)))

    charts = ReportChartGenerator(run_dir)
    last = None
    for index, image in enumerate(images):
        if tuple(image.shape[-2:]) != (model.image_size, model.image_size):
            image = image[:, :model.image_size, :model.image_size]
        grid = []
        for t in config.reconstruct.timesteps:
            generator = make_generator(derive_seed(config.seed, "reconstruct", index, t))
            if method == "mdm":
                masked, recon = reconstruct(model, image, t, diffusion.num_timesteps, diffusion.patch_size,
                                            generator, diffusion.mask_value)
            else:
                masked, recon = _ddpm_reconstruct(model, image, max(int(t), 1), schedule, generator,
                                                  metadata.get("target", "noise"), diffusion.min_alpha_bar)
            grid.append((t, image, masked, recon.clamp(-1, 1)))
            write_image(run_dir / f"image{index}_t{t}_recon.png", recon.clamp(-1, 1))
        last = charts.reconstruction_grid(grid, name=f"reconstruction_{index}.png")
    print(f"✅ 重建预览: {run_dir}")
    return last or run_dir


@torch.no_grad()
def _ddpm_reconstruct(model, image: torch.Tensor, t: int, schedule, generator, target: str,
                      min_alpha_bar: float) -> Tuple[torch.Tensor, torch.Tensor]:
    model.eval()
    noisy, _ = corruption.diffuse(image, t, schedule, generator=generator)
    prediction = model(noisy[None].to(next(model.parameters()).device), t)[0].cpu()
    if target == "noise":
        prediction = corruption.recover_x0(noisy, prediction, t, schedule, min_alpha_bar)
    return noisy, prediction


def cmd_cluster(manager: ConfigManager, checkpoint: Optional[PathLike] = None) -> Dict[int, np.ndarray]:
    """逐解码块k-means并输出叠加图"""
    config, run_dir = prepare_run(manager, "cluster")
    checkpoint = _require_file(checkpoint or default_checkpoint(manager), "检查点")
    params = config.cluster
    extractor, _ = create_extractor(config, checkpoint)
    manifest = open_dataset(config)
    with manifest.use_stage("cluster"):
        image = manifest.load_images(params.split, [params.image_index])[0]
        image_id = manifest.image_ids(params.split)[params.image_index]
    size = extractor.model.image_size
    image = image[:, :size, :size]

    clusters = cluster_blocks(extractor, image, params.timestep, params.blocks, k=params.k,
                              seed=config.seed, n_init=params.n_init, image_id=image_id)
    for block, labels in clusters.items():
        write_label(run_dir / f"cluster_block_{block:02d}_labels.png", labels.astype(np.uint8))
    ReportChartGenerator(run_dir).cluster_overlays(image, clusters)
    print(f"✅ 聚类完成: {len(clusters)} 个解码块, k={params.k}, 输出 {run_dir}")
    return clusters


# ============================================================================
# 消融
# ============================================================================

def ablation_cells(config: RunConfig) -> List[Dict[str, Any]]:
    """展开消融网格，None 轴沿用主配置"""
    grid = config.ablation
    cells = []
    for method, loss, target, fixed_t, timesteps, patch, iterations in itertools.product(
            grid.methods, grid.losses, grid.targets, grid.fixed_ts, grid.extract_timesteps,
            grid.patch_sizes, grid.iterations):
        iterations = config.pretrain.iterations if iterations is None else iterations
        cell = {"method": method, "loss": loss, "target": target, "fixed_t": fixed_t,
                "extract_timesteps": list(timesteps), "patch_size": patch, "iterations": iterations}
        cell["cell"] = (f"{method}-{loss}-{target}-t{'U' if fixed_t is None else fixed_t}"
                        f"-P{patch}-it{iterations}-x{'+'.join(str(t) for t in timesteps)}")
        cells.append(cell)
    return cells


def cell_config(config: RunConfig, cell: Dict[str, Any]) -> RunConfig:
    data = config_to_dict(config)
    data["pretrain"].update(method=cell["method"], loss=cell["loss"], target=cell["target"],
                            fixed_t=cell["fixed_t"], iterations=cell["iterations"])
    data["diffusion"]["patch_size"] = cell["patch_size"]
    data["features"]["timesteps"] = cell["extract_timesteps"]
    return build_run_config(data)


def _pretrain_key(cell: Dict[str, Any]) -> Tuple:
    return (cell["method"], cell["loss"], cell["target"], cell["fixed_t"], cell["patch_size"], cell["iterations"])


def _cell_reason(config: RunConfig, cell: Dict[str, Any]) -> Optional[str]:
    reason = infeasible_reason(cell["method"], cell["loss"], cell["target"], cell["fixed_t"],
                               config.diffusion.num_timesteps)
    if reason:
        return reason
    if config.unet.image_size % cell["patch_size"]:
        return f"patch_size={cell['patch_size']} 不能整除 image_size={config.unet.image_size}"
    if any(t > config.diffusion.num_timesteps for t in cell["extract_timesteps"]):
        return f"提取时间步 {cell['extract_timesteps']} 超出 [0, {config.diffusion.num_timesteps}]"
    return None


def _run_pretrain_cell(config: RunConfig, dataset: torch.Tensor, output_dir: Path) -> Path:
    setup_logger(output_dir, config.log_level)
    return pretrain(config, dataset, output_dir)


def _run_eval_cell(config: RunConfig, checkpoint: Path, manifest_path: str, seeds: Sequence[int]) -> Dict[str, Any]:
    manifest = load_manifest(manifest_path)
    test_split = load_test_split(manifest)
    per_seed = [train_and_evaluate(config, checkpoint, manifest, seed, test_split).scores for seed in seeds]
    result = {}
    for metric in EVAL_METRICS:
        values = [s[metric] for s in per_seed]
        result[f"{metric}_mean"] = float(np.mean(values))
        result[f"{metric}_std"] = float(np.std(values))
    result["per_seed"] = per_seed
    return result


def cmd_ablate(manager: ConfigManager) -> Dict[str, Any]:
    """消融网格：每个可行单元预训练（同一预训练设置只训练一次）并逐种子评估"""
    config, run_dir = prepare_run(manager, "ablate")
    manifest = open_dataset(config)
    dataset = load_pretrain_images(manifest)
    cells = ablation_cells(config)
    n_jobs = config.ablation.max_workers

    feasible, records = [], []
    for cell in cells:
        reason = _cell_reason(config, cell)
        if reason:
            logger.warning(f"跳过不可行单元 {cell['cell']}: {reason}")
            records.append({**cell, "status": "skipped", "reason": reason})
        else:
            feasible.append(cell)
    print(f"\n🔬 消融网格: {len(cells)} 个单元, 可行 {len(feasible)}, 并行 {n_jobs}")

    pretrain_jobs: Dict[Tuple, Tuple[RunConfig, Path]] = {}
    for cell in feasible:
        key = _pretrain_key(cell)
        if key not in pretrain_jobs:
            name = "-".join("U" if v is None else str(v) for v in key)
            pretrain_jobs[key] = (cell_config(config, cell), run_dir / "pretrain" / name)
    checkpoints = Parallel(n_jobs=n_jobs)(
        delayed(_run_pretrain_cell)(cfg, dataset, out) for cfg, out in pretrain_jobs.values())
    checkpoint_for = dict(zip(pretrain_jobs.keys(), checkpoints))

    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_eval_cell)(cell_config(config, cell), checkpoint_for[_pretrain_key(cell)],
                                config.data.manifest, config.metrics.seeds)
        for cell in feasible)
    for cell, result in zip(feasible, results):
        per_seed = result.pop("per_seed")
        records.append({**cell, "status": "ok", "reason": "", **result, "seeds": len(per_seed)})
        print(f"   {cell['cell']:<48} dice={result['dice_mean']:.4f}±{result['dice_std']:.4f}")

    setup_logger(run_dir, config.log_level)
    reporter = ReportGenerator(run_dir)
    path = reporter.write_ablation(records)
    frame = pd.read_csv(path)
    if (frame["status"] == "ok").any():
        ReportChartGenerator(run_dir).ablation_bars(frame)
    return {"ablation": path, "cells": len(cells), "feasible": len(feasible)}


COMMANDS: Dict[str, Callable[..., Any]] = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "train-seg": cmd_train_seg,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "reconstruct": cmd_reconstruct,
    "cluster": cmd_cluster,
}

