"""
数据层测试：图像读写、清单校验与划分守卫、增强、合成数据、退化基准
"""

import json

import numpy as np
import pytest
import torch
from scipy import stats

from data_management import (
    BENCHMARK_KINDS,
    EXTRA_KINDS,
    available_kinds,
    corrupt_test,
    hflip,
    load_manifest,
    random_crop,
    random_flip,
    read_image,
    read_label,
    synth_image,
    synth_shapes,
    write_image,
    write_label,
)
from data_management.synthetic_shapes import NUM_CLASSES
from errors import ConfigError, DataError, ManifestValidationError

from conftest import create_mock_image


def _write_pair(root, name, label_value=0, size=8):
    image = np.full((size, size, 3), 40 + 60 * min(label_value, 2), dtype=np.uint8)
    write_image(root / "images" / f"{name}.png", image)
    write_label(root / "labels" / f"{name}.png", np.full((size, size), label_value, dtype=np.uint8))
    return {"image": f"images/{name}.png", "label": f"labels/{name}.png"}


def _write_manifest(root, splits, num_classes=2, **extra):
    path = root / "manifest.json"
    path.write_text(json.dumps({"num_classes": num_classes, "splits": splits, **extra}), encoding="utf-8")
    return path


@pytest.fixture
def small_dataset(tmp_path):
    a, b, c = (_write_pair(tmp_path, n, v) for n, v in (("a", 0), ("b", 1), ("c", 1)))
    return tmp_path, a, b, c


# ============================================================================
# 图像读写
# ============================================================================

def test_image_round_trip(tmp_path):
    image = create_mock_image(size=8)
    loaded = read_image(write_image(tmp_path / "x.png", image))
    assert loaded.shape == image.shape
    assert float((loaded - image).abs().max()) <= 1.0 / 127.5 + 1e-6
    label = np.arange(64).reshape(8, 8) % 5
    assert np.array_equal(read_label(write_label(tmp_path / "y.png", label)), label)


def test_write_label_rejects_wide_values(tmp_path):
    with pytest.raises(DataError):
        write_label(tmp_path / "z.png", np.full((2, 2), 300))


# ============================================================================
# 清单
# ============================================================================

def test_manifest_loads_splits_and_histograms(small_dataset):
    root, a, b, c = small_dataset
    manifest = load_manifest(_write_manifest(root, {"pretrain": [a["image"], b], "seg_train": [a, b],
                                                    "seg_test": [c]}))
    assert manifest.summary() == {"pretrain": 2, "seg_train": 2, "seg_test": 1}
    assert manifest.label_histograms["seg_train"].tolist() == [64, 64]
    assert manifest.image_ids("seg_test") == ["c"]
    images, labels = manifest.load_pairs("seg_train")
    assert images[0].shape == (3, 8, 8) and labels[1].max() == 1


def test_manifest_rejects_train_test_overlap(small_dataset):
    root, a, b, _ = small_dataset
    with pytest.raises(ManifestValidationError):
        load_manifest(_write_manifest(root, {"seg_train": [a, b], "seg_test": [b]}))


def test_manifest_rejects_pretrain_test_overlap(small_dataset):
    root, a, _, c = small_dataset
    with pytest.raises(ManifestValidationError, match="pretrain"):
        load_manifest(_write_manifest(root, {"pretrain": [a["image"], c["image"]], "seg_train": [a],
                                             "seg_test": [c]}))


def test_manifest_rejects_missing_files_and_labels(small_dataset):
    root, a, _, _ = small_dataset
    with pytest.raises(ManifestValidationError):
        load_manifest(_write_manifest(root, {"seg_train": [{"image": a["image"]}]}))
    with pytest.raises(ManifestValidationError):
        load_manifest(_write_manifest(root, {"pretrain": ["images/missing.png"]}))
    with pytest.raises(ManifestValidationError):
        load_manifest(_write_manifest(root, {"validation": []}))
    with pytest.raises(ManifestValidationError):
        load_manifest(root / "nowhere.json")


def test_manifest_rejects_labels_outside_class_range(small_dataset):
    root, a, b, _ = small_dataset
    two = _write_pair(root, "d", 2)
    with pytest.raises(DataError):
        load_manifest(_write_manifest(root, {"seg_train": [a, two]}, num_classes=2))
    assert load_manifest(_write_manifest(root, {"seg_train": [a, two]}, num_classes=3)).num_classes == 3


def test_ignore_label_excluded_from_range_check(small_dataset):
    root, a, _, _ = small_dataset
    void = _write_pair(root, "v", 255)
    manifest = load_manifest(_write_manifest(root, {"seg_train": [a, void]}, ignore_label=255))
    assert manifest.label_histograms["seg_train"].tolist() == [64, 0]


@pytest.mark.parametrize("stage", ["pretrain", "train_head"])
def test_training_stages_cannot_read_test_split(small_dataset, stage):
    root, a, b, c = small_dataset
    manifest = load_manifest(_write_manifest(root, {"pretrain": [a], "seg_train": [b], "seg_test": [c]}))
    with manifest.use_stage(stage):
        manifest.load_pairs("seg_train")
        with pytest.raises(ManifestValidationError):
            manifest.load_pairs("seg_test")
    assert manifest.stage is None
    with manifest.use_stage("evaluate"):
        assert len(manifest.load_pairs("seg_test")[0]) == 1


# ============================================================================
# 增强
# ============================================================================

def test_random_crop_origin_is_uniform():
    image = torch.zeros(1, 4, 8)
    generator = torch.Generator().manual_seed(0)
    origins = [random_crop(image, size=4, generator=generator, return_origin=True)[2] for _ in range(2000)]
    assert all(oy == 0 for oy, _ in origins)
    counts = np.bincount([ox for _, ox in origins], minlength=5)
    assert len(counts) == 5
    assert stats.chisquare(counts).pvalue > 0.001


def test_random_crop_keeps_image_and_label_aligned():
    image = torch.arange(100, dtype=torch.float32).reshape(1, 10, 10)
    label = np.arange(100).reshape(10, 10)
    crop, crop_label = random_crop(image, label, size=4, generator=torch.Generator().manual_seed(1))
    assert np.array_equal(crop[0].numpy().astype(np.int64), crop_label)


def test_random_crop_pads_small_images():
    crop, label = random_crop(torch.zeros(3, 5, 5), np.zeros((5, 5)), size=8)
    assert crop.shape == (3, 8, 8) and label.shape == (8, 8)


def test_hflip_mirrors_columns():
    image = torch.arange(6, dtype=torch.float32).reshape(1, 2, 3)
    label = np.array([[0, 1, 2], [3, 4, 5]])
    flipped, flipped_label = hflip(image, label)
    assert flipped[0, 0].tolist() == [2.0, 1.0, 0.0]
    assert flipped_label.tolist() == [[2, 1, 0], [5, 4, 3]]
    same, same_label = random_flip(image, label, p=0.0)
    assert same is image and same_label is label


# ============================================================================
# 合成数据
# ============================================================================

def test_synth_image_is_deterministic_and_has_all_classes():
    image, label = synth_image(3, image_size=64, seed=7)
    again, again_label = synth_image(3, image_size=64, seed=7)
    assert np.array_equal(image, again) and np.array_equal(label, again_label)
    assert image.shape == (64, 64, 3) and image.dtype == np.uint8
    assert set(np.unique(label)) == set(range(NUM_CLASSES))
    other, _ = synth_image(4, image_size=64, seed=7)
    assert not np.array_equal(image, other)


def test_synth_shapes_matches_per_index_generation():
    dataset = synth_shapes(3, image_size=32, seed=5)
    assert len(dataset) == 3
    image, label = synth_image(2, image_size=32, seed=5)
    assert np.array_equal(dataset[2][0], image) and np.array_equal(dataset[2][1], label)
    with pytest.raises(DataError):
        synth_shapes(0)


def test_synthetic_manifest_splits(synthetic_manifest):
    manifest = load_manifest(synthetic_manifest)
    assert manifest.summary() == {"pretrain": 8, "seg_train": 3, "seg_test": 4}
    assert manifest.num_classes == NUM_CLASSES
    assert manifest.stacked_images("pretrain").shape == (8, 3, 16, 16)


# ============================================================================
# 退化基准
# ============================================================================

def test_kind_lists():
    assert len(BENCHMARK_KINDS) == 15
    assert available_kinds() == BENCHMARK_KINDS + EXTRA_KINDS
    assert len(set(available_kinds())) == 19


def test_severity_zero_is_identity_copy():
    image = create_mock_image()
    out = corrupt_test(image, "gaussian_noise", 0)
    assert torch.equal(out, image) and out is not image


def test_unknown_kind_and_severity_rejected():
    image = create_mock_image()
    with pytest.raises(ConfigError):
        corrupt_test(image, "fog_of_war", 2)
    with pytest.raises(ConfigError):
        corrupt_test(image, "jpeg", 6)
    with pytest.raises(ConfigError):
        corrupt_test(image, "fog_of_war", 0)


@pytest.mark.parametrize("kind", available_kinds())
def test_every_kind_runs_and_is_seeded(kind):
    image = create_mock_image(size=32, seed=3) * 0.6
    out = corrupt_test(image, kind, 3, torch.Generator().manual_seed(0))
    again = corrupt_test(image, kind, 3, torch.Generator().manual_seed(0))
    assert out.shape == (3, 32, 32) and out.dtype == image.dtype
    assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0
    # 椒盐噪声的随机源在 scikit-image 内部
    if kind != "impulse_noise":
        assert torch.equal(out, again)


def test_small_and_single_channel_images_keep_their_shape():
    small = corrupt_test(create_mock_image(size=16), "gaussian_noise", 2, torch.Generator().manual_seed(0))
    assert small.shape == (3, 16, 16)
    gray = corrupt_test(create_mock_image(size=40, channels=1), "jpeg", 2, torch.Generator().manual_seed(0))
    assert gray.shape == (1, 40, 40)


@pytest.mark.parametrize("kind", ["gaussian_noise", "impulse_noise", "gaussian_blur", "contrast", "jpeg"])
def test_error_grows_with_severity(kind):
    image = create_mock_image(size=32, seed=1) * 0.5
    errors = [float((corrupt_test(image, kind, s, torch.Generator().manual_seed(0)) - image).pow(2).mean())
              for s in range(1, 6)]
    assert errors == sorted(errors)


@pytest.mark.parametrize("kind", ["shot_noise", "defocus_blur", "brightness", "pixelate"])
def test_strongest_severity_hurts_more_than_weakest(kind):
    image = create_mock_image(size=32, seed=2) * 0.5
    mild = corrupt_test(image, kind, 1, torch.Generator().manual_seed(0))
    severe = corrupt_test(image, kind, 5, torch.Generator().manual_seed(0))
    assert float((severe - image).pow(2).mean()) > float((mild - image).pow(2).mean())


def test_noise_depends_on_generator_only():
    image = create_mock_image(size=32)
    a = corrupt_test(image, "gaussian_noise", 2, torch.Generator().manual_seed(5))
    b = corrupt_test(image, "gaussian_noise", 2, torch.Generator().manual_seed(6))
    assert not torch.equal(a, b)


def test_global_numpy_state_is_restored():
    np.random.seed(123)
    expected = np.random.rand()
    np.random.seed(123)
    corrupt_test(create_mock_image(size=32), "spatter", 2, torch.Generator().manual_seed(0))
    assert np.random.rand() == expected
