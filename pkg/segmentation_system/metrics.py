"""
评估指标：Dice、IoU、mIoU、连通域实例提取与 AJI

约定：预测和真值都为空时 Dice/IoU/AJI 取 1。
AJI 采用逐真值实例贪心匹配：每个真值实例匹配与其 IoU 最大的预测实例，
分子累加匹配对的交集，分母累加匹配对的并集以及所有未被匹配的预测实例像素。
"""

from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from errors import ConfigError, DimensionError

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"预测 {pred.shape} 与真值 {gt.shape} 形状不符")


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|)"""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    _check_shapes(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|P∩G| / |P∪G|"""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    _check_shapes(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def per_class_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Dict[int, float]:
    """在预测或真值中出现的类别的 IoU"""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_shapes(pred, gt)
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise ConfigError(f"标签超出 [0, {num_classes})")
    pair = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    confusion = np.bincount(pair, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    intersection = np.diag(confusion)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - intersection
    return {k: float(intersection[k] / union[k]) for k in range(num_classes) if union[k] > 0}


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """两边都不出现的类别不参与平均"""
    scores = per_class_iou(pred, gt, num_classes)
    if not scores:
        return 1.0
    return float(np.mean(list(scores.values())))


def connected_components(binary: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """
    二值图 → 实例图，0 为背景，实例编号从 1 连续递增，按首像素的行优先顺序编号
    """
    if connectivity not in _STRUCTURES:
        raise ConfigError(f"连通性只支持 4 或 8，得到 {connectivity}")
    labeled, count = ndimage.label(np.asarray(binary, dtype=bool), structure=_STRUCTURES[connectivity])
    if count == 0:
        return labeled.astype(np.int64)
    flat = labeled.ravel()
    ids, first = np.unique(flat, return_index=True)
    order = ids[ids > 0][np.argsort(first[ids > 0], kind="stable")]
    remap = np.zeros(count + 1, dtype=np.int64)
    remap[order] = np.arange(1, len(order) + 1)
    return remap[labeled]


def aji(pred: np.ndarray, gt: np.ndarray) -> float:
    """Aggregated Jaccard Index（逐真值实例贪心匹配）"""
    pred, gt = np.asarray(pred, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    _check_shapes(pred, gt)
    gt_ids = [g for g in np.unique(gt) if g > 0]
    pred_ids = [p for p in np.unique(pred) if p > 0]
    if not gt_ids and not pred_ids:
        return 1.0

    n_pred = int(pred.max()) + 1 if pred.size else 1
    n_gt = int(gt.max()) + 1 if gt.size else 1
    overlap = np.bincount(gt.ravel() * n_pred + pred.ravel(), minlength=n_gt * n_pred).reshape(n_gt, n_pred)
    pred_area = overlap.sum(axis=0)
    gt_area = overlap.sum(axis=1)

    intersection_sum = 0
    union_sum = 0
    used = set()
    for g in gt_ids:
        best_p, best_iou = None, 0.0
        for p in pred_ids:
            inter = overlap[g, p]
            if inter == 0:
                continue
            score = inter / (gt_area[g] + pred_area[p] - inter)
            if score > best_iou:
                best_p, best_iou = p, score
        if best_p is None:
            union_sum += int(gt_area[g])
            continue
        inter = int(overlap[g, best_p])
        intersection_sum += inter
        union_sum += int(gt_area[g] + pred_area[best_p] - inter)
        used.add(best_p)

    union_sum += sum(int(pred_area[p]) for p in pred_ids if p not in used)
    return intersection_sum / union_sum if union_sum else 1.0


def foreground_dice_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Dict[str, float]:
    """
    前景 Dice/IoU：K=2 时为类别1；K>2 时对出现过的类别 1..K−1 取平均
    """
    classes = [1] if num_classes == 2 else [k for k in range(1, num_classes)
                                             if (pred == k).any() or (gt == k).any()]
    if not classes:
        return {"dice": 1.0, "iou": 1.0}
    return {
        "dice": float(np.mean([dice(pred == k, gt == k) for k in classes])),
        "iou": float(np.mean([iou(pred == k, gt == k) for k in classes])),
    }


def evaluate_label_map(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                       connectivity: int = 4, ignore_label: Optional[int] = None) -> Dict[str, float]:
    """单张图像的全部指标；真值为 ignore_label 的像素不参与任何指标"""
    pred, gt = np.asarray(pred, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    _check_shapes(pred, gt)
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    scores = foreground_dice_iou(pred[keep], gt[keep], num_classes)
    scores["miou"] = miou(pred[keep], gt[keep], num_classes)
    # 实例需要二维布局，忽略像素在两边都记为背景
    scores["aji"] = aji(connected_components((pred > 0) & keep, connectivity),
                        connected_components((gt > 0) & keep, connectivity))
    return scores


def evaluate_label_maps(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int,
                        connectivity: int = 4, ignore_label: Optional[int] = None) -> Dict[str, float]:
    """逐图计算后取平均"""
    if len(preds) != len(gts) or not preds:
        raise DimensionError(f"预测 {len(preds)} 与真值 {len(gts)} 数量不符或为空")
    per_image: List[Dict[str, float]] = [
        evaluate_label_map(p, g, num_classes, connectivity, ignore_label) for p, g in zip(preds, gts)
    ]
    return {metric: float(np.mean([s[metric] for s in per_image])) for metric in per_image[0]}
