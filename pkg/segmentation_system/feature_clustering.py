"""
特征k-means聚类
对单个解码块（或整个特征栈）的像素特征做k-means，用于观察各块表征的语义粒度
"""

from typing import Dict, Iterable, Optional

import numpy as np
import torch
from loguru import logger
from sklearn.cluster import KMeans

from errors import ConfigError, DegenerateInputError

from .feature_extractor import FeatureExtractor, FeatureStack


def kmeans_feature_clusters(stack: FeatureStack, k: int = 5, seed: int = 0, n_init: int = 10) -> np.ndarray:
    """
    逐像素k-means（k-means++ 初始化，n_init 次重启取惯性最小）

    Returns:
        (H, W) int64 簇编号
    """
    if k < 2:
        raise ConfigError(f"k 至少为 2，得到 {k}")
    pixels = stack.pixels().double().numpy()
    distinct = np.unique(pixels, axis=0).shape[0]
    if distinct < k:
        raise DegenerateInputError(f"只有 {distinct} 个不同的特征向量，少于 k={k}")

    kmeans = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed)
    labels = kmeans.fit_predict(pixels)
    logger.debug(f"k-means 完成: k={k}, 惯性 {kmeans.inertia_:.4f}")
    return labels.reshape(stack.height, stack.width).astype(np.int64)


def cluster_blocks(extractor: FeatureExtractor, image: torch.Tensor, t: int,
                   blocks: Optional[Iterable[int]] = None, k: int = 5, seed: int = 0,
                   n_init: int = 10, image_id: Optional[str] = None) -> Dict[int, np.ndarray]:
    """每个解码块单独聚类，blocks 为空时遍历全部解码块"""
    if blocks is None:
        blocks = range(extractor.model.num_decoder_blocks)
    results = {}
    for block in extractor.model.validate_taps(blocks):
        stack = extractor.extract(image, t, [block], image_id)
        results[block] = kmeans_feature_clusters(stack, k, seed, n_init)
    return results
