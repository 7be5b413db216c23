import logging

import numpy as np
import pytest
import torch

from dislab.datasets import (
    DatasetManifest,
    ManifestRecord,
    MissingImageError,
    generate_synthetic_digit_triplets,
    generate_synthetic_map_triplets,
    load_triplet_array,
    load_triplets,
    split_train_test,
    synthetic_to_arrays,
    write_dataset,
)
from dislab.datasets.loader import read_png, to_tensor_image, write_png
from dislab.datasets.synthetic import (
    MAP_STYLES,
    add_content_noise,
    estimate_map_geometry,
    generate,
)
from dislab.errors import ConfigurationError
from dislab.transfer import StyleClassifier


# ---------------------------------------------------------------- maps

def test_map_generation_is_deterministic():
    a = generate_synthetic_map_triplets(seed=3, count=5)
    b = generate_synthetic_map_triplets(seed=3, count=5)
    assert a.images.keys() == b.images.keys()
    assert all(np.array_equal(a.images[k], b.images[k]) for k in a.images)
    c = generate_synthetic_map_triplets(seed=4, count=5)
    assert any(not np.array_equal(a.images[k], c.images[k]) for k in a.images)


def test_map_geometry_identical_across_styles():
    data = generate_synthetic_map_triplets(seed=0, count=20)
    for key in data.manifest.content_keys():
        layers = [estimate_map_geometry(data.images[key, s], s) for s in MAP_STYLES]
        for layer in layers:
            inter = np.logical_and(layer, data.masks[key]).sum()
            union = np.logical_or(layer, data.masks[key]).sum()
            assert inter == union


def test_map_styles_classifiable():
    data = synthetic_to_arrays(_split(generate_synthetic_map_triplets(seed=1, count=667)))
    assert len(data["train"]) == 500
    clf = StyleClassifier.fit(data["train"], seed=0)
    x, y = data["test"].flat()
    assert np.mean(clf.predict(x) == y.numpy()) >= 0.99


def test_digit_styles_classifiable():
    data = synthetic_to_arrays(_split(generate_synthetic_digit_triplets(seed=1, count=667)))
    clf = StyleClassifier.fit(data["train"], seed=0)
    x, y = data["test"].flat()
    assert np.mean(clf.predict(x) == y.numpy()) >= 0.99


def _split(data, seed=0):
    data.manifest = split_train_test(data.manifest, (3, 1), seed)
    return data


# ---------------------------------------------------------------- digits

def test_digit_plain_is_binary_up_to_antialiasing():
    data = generate_synthetic_digit_triplets(seed=0, count=30)
    for key in data.manifest.content_keys():
        img = data.images[key, "plain"].astype(float) / 255
        near = np.minimum(np.abs(img), np.abs(img - 1)) <= 0.05
        assert near.mean() >= 0.95


def test_digit_noise_only_on_glyph():
    data = generate_synthetic_digit_triplets(seed=0, count=30)
    for key in data.manifest.content_keys():
        plain, noisy = data.images[key, "plain"], data.images[key, "noisy"]
        bg = ~data.masks[key]
        assert np.array_equal(plain[bg], noisy[bg])
        assert not np.array_equal(plain, noisy)


def test_digit_cardinality():
    data = generate_synthetic_digit_triplets(seed=0, count=12)
    assert len(data.images) == 36
    assert len(data.manifest.content_keys()) == 12


def test_generators_reject_bad_args():
    with pytest.raises(ConfigurationError):
        generate_synthetic_map_triplets(seed=0, count=2, image_size=48)
    with pytest.raises(ConfigurationError):
        generate_synthetic_digit_triplets(seed=0, count=0)
    with pytest.raises(ConfigurationError):
        generate("satellite", 0, 2, 32)


def test_content_noise_identities():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16))
    mask = rng.random((16, 16)) > 0.5
    assert np.array_equal(add_content_noise(img, mask, 0.0, rng), img)
    assert np.array_equal(add_content_noise(img, np.zeros_like(mask), 5.0, rng), img)


# std of clip(0.5 + N(0, 0.3^2), 0, 1) - 0.5, by quadrature at 30 digits (mpmath)
CLAMPED_STD_SIGMA_03 = 0.2746812172127466


def test_content_noise_monte_carlo_std():
    img = np.full((100, 1000), 0.5)
    out = add_content_noise(img, np.ones(img.shape, bool), 0.3, np.random.default_rng(1))
    std = (out - img).std()
    assert abs(std - CLAMPED_STD_SIGMA_03) <= 0.05 * CLAMPED_STD_SIGMA_03


def test_content_noise_unclamped_std():
    img = np.full((100, 1000), 0.5)
    out = add_content_noise(img, np.ones(img.shape, bool), 0.05, np.random.default_rng(1))
    assert abs((out - img).std() - 0.05) <= 0.05 * 0.05


def test_content_noise_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        add_content_noise(np.zeros((4, 4)), np.ones((4, 5), bool), 0.1, rng)
    with pytest.raises(ValueError):
        add_content_noise(np.zeros((4, 4)), np.ones((4, 4), bool), -0.1, rng)


# ---------------------------------------------------------------- manifest and split

def _manifest(n):
    keys = [f"k{i:03d}" for i in range(n)]
    recs = [ManifestRecord(k, s, f"{s}/{k}.png") for k in keys for s in ("a", "b", "c")]
    return DatasetManifest(["a", "b", "c"], recs, 32)


def test_split_three_to_one():
    m = split_train_test(_manifest(100), (3, 1), seed=0)
    assert len(m.keys_in_split("train")) == 75 and len(m.keys_in_split("test")) == 25
    m.validate()


def test_split_all_train():
    m = split_train_test(_manifest(10), (1, 0), seed=0)
    assert len(m.keys_in_split("train")) == 10


def test_split_deterministic():
    a = split_train_test(_manifest(40), (3, 1), seed=5)
    b = split_train_test(_manifest(40), (3, 1), seed=5)
    assert a.records == b.records


def test_split_empty_manifest():
    with pytest.raises(ValueError):
        split_train_test(DatasetManifest(["a"], [], 32), (3, 1))


def test_manifest_round_trip(tmp_path):
    m = split_train_test(_manifest(8), (3, 1), seed=0)
    m.write(tmp_path)
    assert DatasetManifest.read(tmp_path) == m


# ---------------------------------------------------------------- loader

def test_png_scaling(tmp_path):
    arr = np.zeros((2, 2, 3), np.uint8)
    arr[0, 0] = 255
    write_png(tmp_path / "x.png", arr)
    t = to_tensor_image(read_png(tmp_path / "x.png"))
    assert t[:, 0, 0].tolist() == [1.0, 1.0, 1.0]
    assert t[:, 1, 1].tolist() == [0.0, 0.0, 0.0]


def test_single_triplet_loads(tmp_path):
    data = generate_synthetic_digit_triplets(seed=0, count=1)
    write_dataset(tmp_path, data)
    ts = load_triplets(DatasetManifest.read(tmp_path), tmp_path, split=None)
    assert len(ts) == 1 and ts.triplets[0].images.shape == (3, 3, 32, 32)


def test_incomplete_triplet_skipped(tmp_path, caplog):
    m = _manifest(1)
    m.records = m.records[:2]
    with caplog.at_level(logging.WARNING):
        ts = load_triplets(m, tmp_path, split=None)
    assert len(ts) == 0 and ts.skipped == ["k000"]
    assert sum("incomplete" in r.message for r in caplog.records) == 1


def test_missing_file_names_key_and_style(tmp_path):
    data = generate_synthetic_digit_triplets(seed=0, count=2)
    write_dataset(tmp_path, data)
    key = data.manifest.content_keys()[1]
    (tmp_path / "noisy" / f"{key}.png").unlink()
    with pytest.raises(MissingImageError) as e:
        load_triplets(DatasetManifest.read(tmp_path), tmp_path, split=None)
    assert e.value.content_key == key and e.value.style_name == "noisy"
    assert key in str(e.value) and "noisy" in str(e.value)


def test_disk_and_memory_paths_agree(tmp_path):
    data = _split(generate_synthetic_map_triplets(seed=2, count=8))
    write_dataset(tmp_path, data)
    disk = load_triplet_array(DatasetManifest.read(tmp_path), tmp_path, "train")
    mem = synthetic_to_arrays(data)["train"]
    assert disk.content_keys == mem.content_keys
    assert torch.equal(disk.images, mem.images)
    assert torch.equal(disk.masks, mem.masks)
