"""
分割系统 - 模块初始化文件

冻结表征上的小样本语义分割：
- feature_extractor: 解码块激活 → 像素特征
- feature_cache_manager: 特征磁盘缓存
- feature_clustering: 特征k-means诊断
- pixel_classifier: 逐像素MLP分割头
- sliding_window: 整图滑窗推理
- metrics: Dice / IoU / mIoU / AJI
"""

from .feature_extractor import (
    FeatureExtractor,
    FeatureStack,
    checkpoint_method,
    extract_features,
    extract_features_multi_t,
    image_key,
)
from .feature_cache_manager import FeatureCacheManager
from .feature_clustering import cluster_blocks, kmeans_feature_clusters
from .pixel_classifier import (
    PixelClassifier,
    SegmentationHead,
    fit_pixels,
    load_head,
    logits_to_labels,
    save_head,
    select_labelled_subset,
    train_head,
)
from .sliding_window import pad_to_window, predict_sliding, tile_pairs, window_origins
from .metrics import (
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

__version__ = "1.0.0"
__description__ = "冻结扩散表征上的小样本分割"

__all__ = [
    'FeatureExtractor', 'FeatureStack', 'checkpoint_method', 'extract_features',
    'extract_features_multi_t', 'image_key',
    'FeatureCacheManager',
    'cluster_blocks', 'kmeans_feature_clusters',
    'PixelClassifier', 'SegmentationHead', 'fit_pixels', 'train_head', 'save_head', 'load_head',
    'logits_to_labels', 'select_labelled_subset',
    'pad_to_window', 'predict_sliding', 'tile_pairs', 'window_origins',
    'dice', 'iou', 'miou', 'per_class_iou', 'connected_components', 'aji',
    'foreground_dice_iou', 'evaluate_label_map', 'evaluate_label_maps',
    'create_extractor',
]


def create_extractor(config, checkpoint_path, seed=None):
    """按 RunConfig 从检查点构建特征提取器和（可选的）缓存"""
    seed = config.seed if seed is None else seed
    extractor = FeatureExtractor.from_checkpoint(checkpoint_path, config.features, seed=seed,
                                                 device=config.device)
    cache = FeatureCacheManager(config.features.cache_dir) if config.features.cache_dir else None
    return extractor, cache
