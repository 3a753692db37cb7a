"""
评估指标测试，包含独立实现的暴力校验
"""

import numpy as np
import pytest

from errors import ConfigError, DimensionError
from segmentation_system.metrics import (
    aji,
    connected_components,
    dice,
    evaluate_label_map,
    evaluate_label_maps,
    foreground_dice_iou,
    iou,
    miou,
    per_class_iou,
)


def brute_dice(pred, gt):
    inter = total = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        inter += int(p and g)
        total += int(bool(p)) + int(bool(g))
    return 1.0 if total == 0 else 2 * inter / total


def brute_components(binary, connectivity=4):
    """广度优先搜索的连通域，按首像素的行优先顺序编号"""
    binary = np.asarray(binary, dtype=bool)
    h, w = binary.shape
    out = np.zeros((h, w), dtype=np.int64)
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    current = 0
    for y in range(h):
        for x in range(w):
            if binary[y, x] and out[y, x] == 0:
                current += 1
                queue = [(y, x)]
                out[y, x] = current
                while queue:
                    cy, cx = queue.pop()
                    for dy, dx in steps:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and out[ny, nx] == 0:
                            out[ny, nx] = current
                            queue.append((ny, nx))
    return out


def brute_aji(pred, gt):
    gt_ids = [g for g in np.unique(gt) if g > 0]
    pred_ids = [p for p in np.unique(pred) if p > 0]
    if not gt_ids and not pred_ids:
        return 1.0
    inter_sum = union_sum = 0
    used = set()
    for g in gt_ids:
        gmask = gt == g
        best, best_score = None, 0.0
        for p in pred_ids:
            pmask = pred == p
            inter = np.logical_and(gmask, pmask).sum()
            if inter == 0:
                continue
            score = inter / np.logical_or(gmask, pmask).sum()
            if score > best_score:
                best, best_score = p, score
        if best is None:
            union_sum += gmask.sum()
        else:
            pmask = pred == best
            inter_sum += np.logical_and(gmask, pmask).sum()
            union_sum += np.logical_or(gmask, pmask).sum()
            used.add(best)
    union_sum += sum((pred == p).sum() for p in pred_ids if p not in used)
    return inter_sum / union_sum


def random_masks(seed, shape=(12, 12), density=0.4):
    rng = np.random.default_rng(seed)
    return rng.random(shape) < density, rng.random(shape) < density


@pytest.mark.parametrize("seed", range(5))
def test_dice_and_iou_match_brute_force(seed):
    pred, gt = random_masks(seed)
    assert dice(pred, gt) == pytest.approx(brute_dice(pred, gt))
    inter, union = np.logical_and(pred, gt).sum(), np.logical_or(pred, gt).sum()
    assert iou(pred, gt) == pytest.approx(inter / union)


def test_empty_masks_score_one():
    empty = np.zeros((4, 4), dtype=bool)
    assert dice(empty, empty) == 1.0
    assert iou(empty, empty) == 1.0
    assert aji(np.zeros((4, 4), int), np.zeros((4, 4), int)) == 1.0


def test_one_sided_empty_scores_zero():
    empty = np.zeros((4, 4), dtype=bool)
    full = np.ones((4, 4), dtype=bool)
    assert dice(full, empty) == 0.0
    assert iou(empty, full) == 0.0


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("connectivity", [4, 8])
def test_connected_components_match_bfs(seed, connectivity):
    binary, _ = random_masks(seed, density=0.45)
    assert np.array_equal(connected_components(binary, connectivity), brute_components(binary, connectivity))


def test_diagonal_pixels_depend_on_connectivity():
    binary = np.eye(3, dtype=bool)
    assert connected_components(binary, 4).max() == 3
    assert connected_components(binary, 8).max() == 1
    with pytest.raises(ConfigError):
        connected_components(binary, 6)


@pytest.mark.parametrize("seed", range(6))
def test_aji_matches_brute_force(seed):
    pred_mask, gt_mask = random_masks(seed, density=0.35)
    pred, gt = connected_components(pred_mask), connected_components(gt_mask)
    assert aji(pred, gt) == pytest.approx(brute_aji(pred, gt))


def test_aji_unmatched_prediction_enters_union():
    gt = np.zeros((4, 8), dtype=int)
    gt[:, :4] = 1
    pred = gt.copy()
    pred[:, 6:] = 2
    # 交集 16，并集 16 + 8
    assert aji(pred, gt) == pytest.approx(16 / 24)


def test_aji_perfect_and_missed():
    gt = connected_components(np.eye(4, dtype=bool), 8)
    assert aji(gt, gt) == 1.0
    assert aji(np.zeros_like(gt), gt) == 0.0


def test_per_class_iou_and_miou_skip_absent_classes():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    scores = per_class_iou(pred, gt, num_classes=4)
    assert set(scores) == {0, 1}
    assert scores[0] == pytest.approx(1 / 2)
    assert scores[1] == pytest.approx(2 / 3)
    assert miou(pred, gt, 4) == pytest.approx((1 / 2 + 2 / 3) / 2)
    with pytest.raises(ConfigError):
        per_class_iou(pred, gt, num_classes=1)


def test_foreground_scores_binary_and_multiclass():
    gt = np.array([[0, 1], [2, 2]])
    pred = np.array([[0, 1], [2, 0]])
    binary = foreground_dice_iou((pred > 0).astype(int), (gt > 0).astype(int), 2)
    assert binary["dice"] == pytest.approx(brute_dice(pred > 0, gt > 0))
    multi = foreground_dice_iou(pred, gt, 3)
    assert multi["dice"] == pytest.approx((1.0 + 2 / 3) / 2)
    assert multi["iou"] == pytest.approx((1.0 + 1 / 2) / 2)


def test_evaluate_label_map_keys_and_ignore():
    gt = np.array([[0, 1], [1, 255]])
    pred = np.array([[0, 1], [1, 1]])
    scores = evaluate_label_map(pred, gt, 2, ignore_label=255)
    assert set(scores) == {"dice", "iou", "miou", "aji"}
    assert scores["dice"] == 1.0 and scores["aji"] == 1.0


def test_ignored_pixels_do_not_count_as_background():
    gt = np.array([[0, 1], [255, 255]])
    pred = np.array([[1, 1], [0, 0]])
    scores = evaluate_label_map(pred, gt, 2, ignore_label=255)
    # 背景 IoU 0，前景 IoU 1/2
    assert scores["miou"] == pytest.approx(0.25)
    assert scores["miou"] == pytest.approx(miou(pred[0], gt[0], 2))
    assert scores["iou"] == pytest.approx(0.5)


def test_foreground_predicted_on_ignored_pixels_is_dropped():
    gt = np.array([[1, 0, 0], [255, 255, 255]])
    pred = np.array([[1, 0, 0], [1, 1, 1]])
    scores = evaluate_label_map(pred, gt, 2, ignore_label=255)
    assert scores == {"dice": 1.0, "iou": 1.0, "miou": 1.0, "aji": 1.0}


def test_evaluate_label_maps_means_per_image():
    gt = np.array([[1, 1], [0, 0]])
    perfect = evaluate_label_maps([gt, np.zeros_like(gt)], [gt, gt], 2)
    assert perfect["dice"] == pytest.approx(0.5)
    with pytest.raises(DimensionError):
        evaluate_label_maps([], [], 2)


def brute_miou(pred, gt, num_classes):
    scores = []
    for k in range(num_classes):
        p, g = pred == k, gt == k
        union = np.logical_or(p, g).sum()
        if union:
            scores.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(scores)) if scores else 1.0


def test_oracle_parity_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        pred = rng.integers(0, 3, size=(16, 16))
        gt = rng.integers(0, 3, size=(16, 16))
        p_fg, g_fg = pred > 0, gt > 0
        assert dice(p_fg, g_fg) == pytest.approx(brute_dice(p_fg, g_fg), abs=1e-12)
        score = iou(p_fg, g_fg)
        assert score == pytest.approx(np.logical_and(p_fg, g_fg).sum() / np.logical_or(p_fg, g_fg).sum(), abs=1e-12)
        assert abs(dice(p_fg, g_fg) - 2 * score / (1 + score)) < 1e-12
        assert miou(pred, gt, 3) == pytest.approx(brute_miou(pred, gt, 3), abs=1e-12)
        p_inst, g_inst = connected_components(pred == 1), connected_components(gt == 1)
        assert aji(p_inst, g_inst) == pytest.approx(brute_aji(p_inst, g_inst), abs=1e-12)
