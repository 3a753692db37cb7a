"""
特征提取、特征缓存与特征聚类测试
"""

import numpy as np
import pytest
import torch

from config import DiffusionParams
from diffusion_system.checkpoint import checkpoint_sha256, model_state_hash, save_checkpoint
from errors import ConfigError, DegenerateInputError, TimestepRangeError
from segmentation_system import (
    FeatureCacheManager,
    FeatureExtractor,
    FeatureStack,
    checkpoint_method,
    cluster_blocks,
    extract_features,
    extract_features_multi_t,
    kmeans_feature_clusters,
)

from conftest import TINY_T, create_mock_image


@pytest.fixture
def extractor(tiny_model, tiny_schedule) -> FeatureExtractor:
    return FeatureExtractor(tiny_model, tiny_schedule, method="mdm", patch_size=4,
                            checkpoint_id="tiny", seed=0)


def test_feature_shape_and_channel_bookkeeping(extractor, mock_image):
    stack = extractor.extract(mock_image, 5, [0, 2], image_id="img")
    table = extractor.model.architecture_table
    assert stack.data.shape == (table[0].channels + table[2].channels, 16, 16)
    assert stack.channels_per_block == {0: table[0].channels, 2: table[2].channels}
    assert stack.pixels().shape == (256, stack.num_channels)


def test_blocks_are_concatenated_in_ascending_order(extractor, mock_image):
    forward = extractor.extract(mock_image, 5, [0, 2], image_id="img")
    backward = extractor.extract(mock_image, 5, [2, 0], image_id="img")
    assert forward.blocks == backward.blocks == (0, 2)
    assert torch.equal(forward.data, backward.data)


def test_extraction_repeatable_for_same_image_id(extractor, mock_image):
    a = extractor.extract(mock_image, 12, [1], image_id="same")
    b = extractor.extract(mock_image, 12, [1], image_id="same")
    assert torch.equal(a.data, b.data)
    c = extractor.extract(mock_image, 12, [1], image_id="other")
    assert not torch.equal(a.data, c.data)


def test_t0_uses_clean_input(extractor, mock_image):
    with torch.no_grad():
        _, activations = extractor.model.forward_with_activations(mock_image[None], 0, [3])
    stack = extractor.extract(mock_image, 0, [3], image_id="x")
    assert torch.allclose(stack.data, activations[3][0])


def test_clean_input_flag_skips_corruption(tiny_model, tiny_schedule, mock_image):
    clean = FeatureExtractor(tiny_model, tiny_schedule, patch_size=4, clean_input=True)
    with torch.no_grad():
        _, activations = tiny_model.forward_with_activations(mock_image[None], 9, [3])
    assert torch.allclose(clean.extract(mock_image, 9, [3]).data, activations[3][0])


def test_ddpm_extraction_differs_from_mdm(tiny_model, tiny_schedule, mock_image):
    mdm = FeatureExtractor(tiny_model, tiny_schedule, method="mdm", patch_size=4)
    ddpm = FeatureExtractor(tiny_model, tiny_schedule, method="ddpm", patch_size=4)
    assert not torch.equal(mdm.corrupt(mock_image, 10, "k"), ddpm.corrupt(mock_image, 10, "k"))


def test_extraction_leaves_model_untouched(extractor, mock_image):
    before = model_state_hash(extractor.model)
    stack = extractor.extract(mock_image, 7, [0, 1, 2, 3])
    assert model_state_hash(extractor.model) == before
    assert not stack.data.requires_grad


def test_multi_t_concatenates_in_given_order(extractor, mock_image):
    stack = extractor.extract_multi_t(mock_image, [8, 2], [1], image_id="m")
    first = extractor.extract(mock_image, 8, [1], image_id="m")
    second = extractor.extract(mock_image, 2, [1], image_id="m")
    assert stack.timesteps == (8, 2)
    assert torch.equal(stack.data, torch.cat([first.data, second.data]))


def test_multi_t_validation(extractor, mock_image):
    with pytest.raises(ConfigError):
        extractor.extract_multi_t(mock_image, [], [1])
    with pytest.raises(TimestepRangeError):
        extractor.extract_multi_t(mock_image, [TINY_T + 1], [1])
    with pytest.raises(TimestepRangeError):
        extractor.extract(mock_image, 2, [9])


def test_resolve_blocks_remaps_reference_numbering(extractor):
    assert extractor.resolve_blocks([1, 3]) == [1, 3]
    assert extractor.resolve_blocks([8, 9, 10, 11, 12], reference_count=18) == [1, 2]


def test_functional_wrappers_match_extractor(tiny_model, tiny_schedule, mock_image, extractor):
    single = extract_features(tiny_model, mock_image, 5, [2], tiny_schedule, patch_size=4,
                              image_id="f", checkpoint_id="tiny")
    assert torch.equal(single.data, extractor.extract(mock_image, 5, [2], image_id="f").data)
    multi = extract_features_multi_t(tiny_model, mock_image, [5, 6], [2], tiny_schedule, patch_size=4,
                                     image_id="f")
    assert multi.num_channels == 2 * single.num_channels


def test_from_checkpoint_reads_method(tmp_path, tiny_model):
    path = save_checkpoint(tmp_path / "m.pt", tiny_model, DiffusionParams(num_timesteps=TINY_T, patch_size=4),
                           metadata={"method": "ddpm"})
    loaded = FeatureExtractor.from_checkpoint(path)
    assert loaded.method == "ddpm"
    assert loaded.patch_size == 4
    assert loaded.checkpoint_id == checkpoint_sha256(path)


def test_checkpoint_method_fallbacks():
    assert checkpoint_method({"metadata": {}, "training_state": None}) == "mdm"
    assert checkpoint_method({"training_state": {"pretrain_params": {"method": "ddpm"}}}) == "ddpm"
    with pytest.raises(ConfigError):
        checkpoint_method({"metadata": {"method": "gan"}})


# ============================================================================
# 缓存
# ============================================================================

def test_cache_hit_returns_identical_features(tmp_path, extractor, mock_image):
    cache = FeatureCacheManager(tmp_path / "cache")
    first = extractor.extract_many([mock_image], [3], [1, 2], ["a"], cache)[0]
    second = extractor.extract_many([mock_image], [3], [1, 2], ["a"], cache)[0]
    assert torch.equal(first.data, second.data)
    assert second.blocks == (1, 2) and second.channels_per_block == first.channels_per_block
    stats = cache.stats()
    assert (stats["hits"], stats["misses"], stats["writes"], stats["entries"]) == (1, 1, 1, 1)


def test_cache_key_separates_settings():
    key = FeatureCacheManager.make_key("ck", "img", [3], [1, 2])
    assert key == FeatureCacheManager.make_key("ck", "img", [3], [2, 1])
    assert key != FeatureCacheManager.make_key("ck", "img", [3], [1, 2], clean_input=True)
    assert key != FeatureCacheManager.make_key("ck", "img", [3], [1, 2], seed=1)
    assert key != FeatureCacheManager.make_key("ck", "img", [4], [1, 2])


def test_cache_clear(tmp_path, extractor, mock_image):
    cache = FeatureCacheManager(tmp_path / "cache")
    extractor.extract_many([mock_image], [3], [1], ["a"], cache)
    assert cache.clear() == 1
    assert cache.stats()["entries"] == 0


# ============================================================================
# 聚类
# ============================================================================

def _two_cluster_stack() -> FeatureStack:
    data = torch.zeros(2, 8, 8)
    data[0, :, 4:] = 5.0
    data[1] += torch.linspace(0, 0.01, 64).reshape(8, 8)
    return FeatureStack(data=data, checkpoint_id="x", timesteps=(0,), blocks=(0,))


def test_kmeans_separates_obvious_clusters():
    labels = kmeans_feature_clusters(_two_cluster_stack(), k=2, seed=0)
    assert labels.shape == (8, 8) and labels.dtype == np.int64
    assert len(np.unique(labels[:, :4])) == 1 and len(np.unique(labels[:, 4:])) == 1
    assert labels[0, 0] != labels[0, 7]


def test_kmeans_is_seeded():
    stack = FeatureStack(data=torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(0)),
                         checkpoint_id="x", timesteps=(0,), blocks=(0,))
    assert np.array_equal(kmeans_feature_clusters(stack, 3, seed=1), kmeans_feature_clusters(stack, 3, seed=1))


def test_kmeans_degenerate_and_bad_k():
    constant = FeatureStack(data=torch.ones(3, 4, 4), checkpoint_id="x", timesteps=(0,), blocks=(0,))
    with pytest.raises(DegenerateInputError):
        kmeans_feature_clusters(constant, k=2)
    with pytest.raises(ConfigError):
        kmeans_feature_clusters(_two_cluster_stack(), k=1)


def test_cluster_blocks_covers_all_blocks(extractor):
    clusters = cluster_blocks(extractor, create_mock_image(seed=4), 3, k=3, n_init=2, image_id="c")
    assert sorted(clusters) == [0, 1, 2, 3]
    assert all(labels.shape == (16, 16) for labels in clusters.values())
