import math

import numpy as np
import pytest
import torch
from PIL import Image

from dislab.datasets import TripletArray, generate_synthetic_digit_triplets, split_train_test, synthetic_to_arrays
from dislab.models import DSEDModel, FENModel, ModelConfig
from dislab.transfer import (
    GRID_BOX_COLOR,
    GRID_SEPARATOR,
    StyleClassifier,
    disentanglement_report,
    dsed_cross_style_rates,
    emit_image_grid,
    grid_canvas_size,
    off_diagonal_mean,
    probe_accuracy,
    reconstruct,
    sample_transfer_pairs,
    style_transfer,
    train_probe,
)


@pytest.fixture(scope="module")
def digits():
    data = generate_synthetic_digit_triplets(seed=0, count=80)
    data.manifest = split_train_test(data.manifest, (3, 1), 0)
    return synthetic_to_arrays(data)


@pytest.fixture(scope="module")
def model():
    return FENModel(ModelConfig(), seed=0).eval()


# ---------------------------------------------------------------- transfer

def test_identity_transfer_is_reconstruction(model):
    x = torch.rand(5, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    assert torch.equal(style_transfer(model, x, x), reconstruct(model, x))
    assert torch.equal(style_transfer(model, x[0], x[0]), reconstruct(model, x[0])[0])


def test_transfer_shapes(model):
    x, y = torch.rand(4, 3, 32, 32), torch.rand(4, 3, 32, 32)
    assert style_transfer(model, x, y).shape == x.shape
    assert style_transfer(model, x[1], y[2]).shape == (3, 32, 32)


def test_transfer_uses_content_and_style_slices(model):
    g = torch.Generator().manual_seed(1)
    a, b = torch.rand(1, 3, 32, 32, generator=g), torch.rand(1, 3, 32, 32, generator=g)
    c = model.cfg.content_dim
    with torch.no_grad():
        mu_a, mu_b = model.encoder(a).mu, model.encoder(b).mu
        expected = model.decoder(torch.cat([mu_a[:, :c], mu_b[:, c:]], 1))
    assert torch.equal(style_transfer(model, a, b), expected)


@pytest.mark.parametrize("a, b", [((3, 32, 32), (3, 64, 64)), ((2, 3, 32, 32), (3, 3, 32, 32)), ((1, 32, 32), (1, 32, 32))])
def test_transfer_shape_mismatch(model, a, b):
    with pytest.raises(ValueError):
        style_transfer(model, torch.rand(*a), torch.rand(*b))


# ---------------------------------------------------------------- probes

def test_probe_separable_1d():
    x = np.r_[np.linspace(-3, -1, 20), np.linspace(1, 3, 20)][:, None]
    y = np.r_[np.zeros(20, int), np.ones(20, int)]
    probe = train_probe(x, y, seed=0)
    assert probe_accuracy(probe, x, y) == 1.0


def test_probe_shuffled_labels_at_chance():
    rng = np.random.default_rng(0)
    k, n = 3, 1000
    x_tr, x_te = rng.normal(size=(600, 8)), rng.normal(size=(n, 8))
    y_tr, y_te = rng.integers(0, k, 600), rng.integers(0, k, n)
    acc = probe_accuracy(train_probe(x_tr, y_tr, seed=0), x_te, y_te)
    sigma = math.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(acc - 1 / k) <= 3 * sigma


def test_probe_deterministic():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(90, 5)), np.repeat([0, 1, 2], 30)
    a, b = train_probe(x, y, seed=3), train_probe(x, y, seed=3)
    assert np.array_equal(a.predict(x), b.predict(x))
    assert np.array_equal(a.classifier.coef_, b.classifier.coef_)


def test_probe_rejects_single_class_and_small_classes():
    with pytest.raises(ValueError):
        train_probe(np.zeros((20, 2)), np.zeros(20, int))
    with pytest.raises(ValueError):
        train_probe(np.zeros((15, 2)), np.r_[np.zeros(10, int), np.ones(5, int)])


# ---------------------------------------------------------------- report

def _style_free(data: TripletArray) -> TripletArray:
    """Triplets whose 'styles' are three unrelated plain-style images: labels carry no pixel signal."""
    n = len(data) // 3
    plain = data.images[:, 0]
    images = torch.stack([plain[3 * i: 3 * i + 3] for i in range(n)])
    return TripletArray(images, data.content_keys[:n], list(data.style_names))


def test_untrained_model_probe_at_chance_without_style_signal(digits, model):
    train, test = _style_free(digits["train"]), _style_free(digits["test"])
    rep = disentanglement_report(model, train, test, seed=0, n_pairs=30,
                                 classifier=StyleClassifier.fit(digits["train"], 0))
    assert abs(rep.friend_probe_acc - rep.chance_level) <= 0.15
    assert abs(rep.enemy_probe_acc - rep.chance_level) <= 0.15


def test_report_fields_finite_and_in_range(digits, model):
    rep = disentanglement_report(model, digits["train"], digits["test"], seed=0, n_pairs=40)
    assert rep.is_finite()
    for v in (rep.friend_probe_acc, rep.enemy_probe_acc, rep.transfer_style_rate):
        assert 0.0 <= v <= 1.0
    assert rep.chance_level == pytest.approx(1 / 3)
    assert rep.content_retention >= 0 and rep.content_retention_kind == "pixel_mse"
    assert rep.n_eval == 3 * len(digits["test"])


def test_report_deterministic(digits, model, tmp_path):
    a = disentanglement_report(model, digits["train"], digits["test"], seed=0, n_pairs=20)
    b = disentanglement_report(model, digits["train"], digits["test"], seed=0, n_pairs=20)
    assert a == b
    a.write(tmp_path / "a.json")
    b.write(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_transfer_pairs_change_style():
    pairs = sample_transfer_pairs(10, 3, 500, seed=0)
    assert pairs.shape == (500, 4)
    assert np.all(pairs[:, 1] != pairs[:, 3]) and np.all(pairs[:, 0] != pairs[:, 2])
    assert np.array_equal(pairs, sample_transfer_pairs(10, 3, 500, seed=0))


def test_style_classifier_on_real_images(digits):
    clf = StyleClassifier.fit(digits["train"], 0)
    x, y = digits["test"].flat()
    assert np.mean(clf.predict(x) == y.numpy()) >= 0.95


def test_dsed_cross_style_rates_shape(digits):
    cfg = ModelConfig(variant="dsed", content_dim=0)
    m = DSEDModel(cfg, digits["train"].style_names, seed=0).eval()
    rates = dsed_cross_style_rates(m, digits["test"], StyleClassifier.fit(digits["train"], 0))
    assert rates.shape == (3, 3) and ((rates >= 0) & (rates <= 1)).all()
    assert off_diagonal_mean(np.arange(9.0).reshape(3, 3)) == pytest.approx((1 + 2 + 3 + 5 + 6 + 7) / 6)


# ---------------------------------------------------------------- grids

def _imgs(n, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(3, size, size, generator=g) for _ in range(n)]


def test_grid_one_by_one(tmp_path):
    path = emit_image_grid([_imgs(1)], ["input"], tmp_path / "g.png")
    w, h = Image.open(path).size
    assert (h, w) == grid_canvas_size(1, 1, 32, 32) and h > 32 and w > 32


def test_grid_layout_formula(tmp_path):
    rows = [_imgs(8, seed=i) for i in range(4)]
    path = emit_image_grid(rows, [f"r{i}" for i in range(4)], tmp_path / "g.png")
    img = Image.open(path)
    assert img.size == (8 * 32 + 9 * GRID_SEPARATOR, 4 * 32 + 5 * GRID_SEPARATOR)
    assert [img.text[f"row{i}"] for i in range(4)] == ["r0", "r1", "r2", "r3"]


def test_grid_top_row_boxed(tmp_path):
    arr = np.asarray(Image.open(emit_image_grid([_imgs(2), _imgs(2, seed=1)], None, tmp_path / "g.png")))
    assert tuple(arr[0, 5]) == GRID_BOX_COLOR
    assert tuple(arr[32 + GRID_SEPARATOR, 5]) == GRID_BOX_COLOR
    assert tuple(arr[-1, 5]) != GRID_BOX_COLOR


def test_grid_cells_placed_exactly(tmp_path):
    cells = [[np.full((4, 4, 3), 10 * (3 * r + c), np.uint8) for c in range(3)] for r in range(2)]
    arr = np.asarray(Image.open(emit_image_grid(cells, None, tmp_path / "g.png")))
    s = GRID_SEPARATOR
    for r in range(2):
        for c in range(3):
            y, x = s + r * (4 + s), s + c * (4 + s)
            assert (arr[y:y + 4, x:x + 4] == 10 * (3 * r + c)).all()


def test_grid_deterministic_bytes(tmp_path):
    rows = [_imgs(3), _imgs(3, seed=5)]
    a = emit_image_grid(rows, ["a", "b"], tmp_path / "a.png").read_bytes()
    b = emit_image_grid(rows, ["a", "b"], tmp_path / "b.png").read_bytes()
    assert a == b


def test_grid_rejects_ragged_and_bad_input(tmp_path):
    with pytest.raises(ValueError):
        emit_image_grid([_imgs(2), _imgs(3)], None, tmp_path / "g.png")
    with pytest.raises(ValueError):
        emit_image_grid([], None, tmp_path / "g.png")
    with pytest.raises(ValueError):
        emit_image_grid([_imgs(2)], ["a", "b"], tmp_path / "g.png")
    with pytest.raises(ValueError):
        emit_image_grid([_imgs(1), _imgs(1, size=64)], None, tmp_path / "g.png")


def test_style_classifier_accepts_smoothed_renderings(digits):
    from dislab.transfer import gaussian_smooth

    x, y = digits["test"].flat()
    smooth = StyleClassifier.fit(digits["train"], 0)
    raw = StyleClassifier.fit(digits["train"], 0, smooth_sigma=0.0)
    blurred = gaussian_smooth(x, 1.0)
    assert np.mean(smooth.predict(blurred) == y.numpy()) > np.mean(raw.predict(blurred) == y.numpy())
    assert np.mean(smooth.predict(x) == y.numpy()) >= 0.95
    assert raw.smooth_sigma == 0.0 and np.mean(raw.predict(x) == y.numpy()) >= 0.95
