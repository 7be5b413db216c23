"""Style transfer by latent recombination, and disentanglement measurement.

Probes here are linear classifiers fitted outside the training loop, so they
measure what a latent slice carries without inheriting the bias of the model's
own Friend/Enemy heads.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, PngImagePlugin
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .datasets.loader import TripletArray
from .datasets.synthetic import MAP_PALETTES, estimate_map_geometry
from .models import DSEDModel, FENModel

GRID_SEPARATOR = 2
GRID_SEPARATOR_COLOR = (128, 128, 128)
GRID_BOX_COLOR = (220, 30, 30)


# ---------------------------------------------------------------- latents and transfer

def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


@torch.no_grad()
def encode_mu(model: FENModel, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    images = _batched(images)
    return torch.cat([model.encoder(images[i:i + batch_size]).mu for i in range(0, len(images), batch_size)])


@torch.no_grad()
def reconstruct(model: FENModel, images: torch.Tensor) -> torch.Tensor:
    """Decode the posterior mean of each image."""
    return model.decoder(encode_mu(model, images))


@torch.no_grad()
def style_transfer(model: FENModel, content_image: torch.Tensor, style_image: torch.Tensor) -> torch.Tensor:
    """Decode the content slice of one image joined to the style slice of another.

    Both slices come from the posterior mean. Accepts single ``(C, H, W)``
    images or equally sized batches.
    """
    cfg = model.cfg
    expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
    a, b = _batched(content_image), _batched(style_image)
    if tuple(a.shape[1:]) != expected or a.shape != b.shape:
        raise ValueError(
            f"content {tuple(content_image.shape)} and style {tuple(style_image.shape)} "
            f"must both be {expected} (or equal batches of it)"
        )
    c = cfg.content_dim
    mu_a, mu_b = encode_mu(model, a), encode_mu(model, b)
    out = model.decoder(torch.cat([mu_a[:, :c], mu_b[:, c:]], dim=1))
    return out[0] if content_image.dim() == 3 else out


# ---------------------------------------------------------------- probes

@dataclass
class LinearProbe:
    classifier: LogisticRegression
    classes: np.ndarray

    def predict(self, x) -> np.ndarray:
        return self.classifier.predict(np.asarray(x, dtype=np.float64))


def train_probe(slices, labels, seed: int = 0, l2: float = 1.0, min_per_class: int = 10) -> LinearProbe:
    """Fit a multinomial logistic-regression probe (L2 penalty ``1/l2``-scaled as in sklearn's C)."""
    x = np.asarray(slices, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"need (n, d) slices and n labels, got {x.shape} and {y.shape}")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("probe needs at least two classes")
    if counts.min() < min_per_class:
        raise ValueError(f"probe needs >= {min_per_class} examples per class, smallest has {counts.min()}")
    if x.shape[1] == 0:
        x = np.zeros((len(x), 1))
    clf = LogisticRegression(C=l2, max_iter=5000, tol=1e-8, random_state=seed)
    clf.fit(x, y)
    return LinearProbe(clf, classes)


def probe_accuracy(probe: LinearProbe, slices, labels) -> float:
    x = np.asarray(slices, dtype=np.float64)
    if x.shape[1] == 0:
        x = np.zeros((len(x), 1))
    return float(np.mean(probe.predict(x) == np.asarray(labels)))


def image_features(images: torch.Tensor) -> np.ndarray:
    """Fixed colour/texture summary used by the pixel-space style classifier.

    Per image: 4x4 pooled RGB, per-channel 8-bin histograms, per-channel
    standard deviation, and mean absolute horizontal/vertical gradients.
    """
    x = _batched(images).detach().double()
    n = x.shape[0]
    pooled = torch.nn.functional.adaptive_avg_pool2d(x, 4).reshape(n, -1)
    flat = x.reshape(n, x.shape[1], -1)
    bins = torch.clamp((flat * 8).long(), 0, 7)
    hist = torch.zeros(n, x.shape[1], 8, dtype=torch.float64).scatter_add_(2, bins, torch.ones_like(flat))
    hist = hist.reshape(n, -1) / flat.shape[-1]
    std = flat.std(dim=2)
    gx = (x[..., :, 1:] - x[..., :, :-1]).abs().mean(dim=(1, 2, 3))
    gy = (x[..., 1:, :] - x[..., :-1, :]).abs().mean(dim=(1, 2, 3))
    return torch.cat([pooled, hist, std, gx[:, None], gy[:, None]], dim=1).numpy()


def gaussian_smooth(images: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with replicate padding; ``sigma`` in pixels."""
    x = _batched(images)
    if sigma <= 0:
        return x
    r = max(1, int(3 * sigma))
    t = torch.arange(-r, r + 1, dtype=x.dtype)
    k = torch.exp(-t ** 2 / (2 * sigma ** 2))
    k = k / k.sum()
    c = x.shape[1]
    x = torch.nn.functional.pad(x, (r, r, r, r), mode="replicate")
    x = torch.nn.functional.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return torch.nn.functional.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


@dataclass
class StyleClassifier:
    """Linear probe on standardized :func:`image_features`; fitted on real dataset images only.

    With ``smooth_sigma > 0`` the training set also holds a Gaussian-smoothed
    copy of every image. Decoders trained with MSE emit the per-pixel mean,
    so per-pixel noise styles show up in their outputs as a dimmer, softer
    glyph rather than as noise; the smoothed copies teach the probe that form.
    """

    scaler: StandardScaler
    probe: LinearProbe
    style_names: list[str]
    smooth_sigma: float = 1.0

    @classmethod
    def fit(cls, data: TripletArray, seed: int = 0, smooth_sigma: float = 1.0) -> "StyleClassifier":
        x, labels = data.flat()
        y = labels.numpy()
        if smooth_sigma > 0:
            x = torch.cat([x, gaussian_smooth(x, smooth_sigma)])
            y = np.concatenate([y, y])
        feats = image_features(x)
        scaler = StandardScaler().fit(feats)
        probe = train_probe(scaler.transform(feats), y, seed)
        return cls(scaler, probe, list(data.style_names), smooth_sigma)

    def predict(self, images: torch.Tensor) -> np.ndarray:
        return self.probe.predict(self.scaler.transform(image_features(images)))


# ---------------------------------------------------------------- report

@dataclass
class DisentanglementReport:
    friend_probe_acc: float
    enemy_probe_acc: float
    chance_level: float
    transfer_style_rate: float
    content_retention: float
    content_retention_kind: str
    n_eval: int

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.friend_probe_acc, self.enemy_probe_acc,
                                               self.transfer_style_rate, self.content_retention))


def sample_transfer_pairs(n_keys: int, k: int, n_pairs: int, seed: int) -> np.ndarray:
    """Rows of (content_key_idx, content_style, style_key_idx, style_style), styles differing."""
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n_keys, n_pairs)
    b = (a + rng.integers(1, max(n_keys, 2), n_pairs)) % max(n_keys, 1)
    sa = rng.integers(0, k, n_pairs)
    sb = (sa + rng.integers(1, k, n_pairs)) % k
    return np.stack([a, sa, b, sb], 1)


def _content_retention(outputs: torch.Tensor, pairs: np.ndarray, test: TripletArray) -> tuple[float, str]:
    styles = test.style_names
    if test.masks is not None and all(s in MAP_PALETTES for s in styles):
        errs = []
        for out, (a, _, _, sb) in zip(outputs, pairs):
            est = estimate_map_geometry(out.permute(1, 2, 0).numpy(), styles[sb])
            errs.append(np.mean((est.astype(float) - test.masks[a].numpy().astype(float)) ** 2))
        return float(np.mean(errs)), "geometry_mask"
    donors = test.images[pairs[:, 0], pairs[:, 1]]
    return float(((outputs - donors) ** 2).mean()), "pixel_mse"


def disentanglement_report(model: FENModel, train: TripletArray, test: TripletArray,
                           seed: int = 0, n_pairs: int = 200,
                           classifier: StyleClassifier | None = None) -> DisentanglementReport:
    """Probe both latent slices and score recombination transfers on held-out triplets.

    Probes are fitted on training-split posterior means and scored on the
    test split; the style classifier is fitted on training-split images.
    """
    c = model.cfg.content_dim
    k = len(test.style_names)
    x_tr, y_tr = train.flat()
    x_te, y_te = test.flat()
    mu_tr, mu_te = encode_mu(model, x_tr).numpy(), encode_mu(model, x_te).numpy()
    friend = train_probe(mu_tr[:, c:], y_tr.numpy(), seed)
    enemy = train_probe(mu_tr[:, :c], y_tr.numpy(), seed)
    friend_acc = probe_accuracy(friend, mu_te[:, c:], y_te.numpy())
    enemy_acc = probe_accuracy(enemy, mu_te[:, :c], y_te.numpy())

    classifier = classifier or StyleClassifier.fit(train, seed)
    pairs = sample_transfer_pairs(len(test), k, n_pairs, seed)
    content_imgs = test.images[pairs[:, 0], pairs[:, 1]]
    style_imgs = test.images[pairs[:, 2], pairs[:, 3]]
    outputs = style_transfer(model, content_imgs, style_imgs)
    rate = float(np.mean(classifier.predict(outputs) == pairs[:, 3]))
    retention, kind = _content_retention(outputs, pairs, test)
    return DisentanglementReport(friend_acc, enemy_acc, 1.0 / k, rate, retention, kind, len(y_te))


@torch.no_grad()
def dsed_cross_style_rates(model: DSEDModel, test: TripletArray, classifier: StyleClassifier) -> np.ndarray:
    """``rates[s, t]``: fraction of style-s test images that, decoded by decoder t, classify as t."""
    if list(model.style_names) != list(test.style_names):
        raise ValueError(f"model styles {model.style_names} do not match data styles {test.style_names}")
    k = len(test.style_names)
    rates = np.zeros((k, k))
    for s in range(k):
        mu = model.encoders[s](test.images[:, s]).mu
        for t in range(k):
            rates[s, t] = np.mean(classifier.predict(model.decoders[t](mu)) == t)
    return rates


def off_diagonal_mean(m: np.ndarray) -> float:
    k = m.shape[0]
    return float(m[~np.eye(k, dtype=bool)].mean()) if k > 1 else float("nan")


# ---------------------------------------------------------------- grids

def _to_uint8_hwc(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        a = image.detach().cpu().numpy()
        if a.ndim == 3 and a.shape[0] in (1, 3):
            a = np.moveaxis(a, 0, -1)
    else:
        a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    return a


def grid_canvas_size(rows: int, cols: int, height: int, width: int) -> tuple[int, int]:
    """(height, width) of a grid: cells plus a separator before, between and after them."""
    return rows * height + (rows + 1) * GRID_SEPARATOR, cols * width + (cols + 1) * GRID_SEPARATOR


def emit_image_grid(rows: Sequence[Sequence], row_labels: Sequence[str] | None, path: str | Path) -> Path:
    """Write a grid PNG whose top row (the inputs) is outlined in red.

    Row labels are stored as PNG text chunks rather than drawn, keeping the
    canvas size exactly :func:`grid_canvas_size`.
    """
    if not rows or not rows[0]:
        raise ValueError("grid needs at least one row and one column")
    ncols = len(rows[0])
    if any(len(r) != ncols for r in rows):
        raise ValueError(f"ragged grid: row lengths {[len(r) for r in rows]}")
    if row_labels is not None and len(row_labels) != len(rows):
        raise ValueError("one label per row required")
    cells = [[_to_uint8_hwc(im) for im in r] for r in rows]
    h, w = cells[0][0].shape[:2]
    if any(c.shape[:2] != (h, w) for r in cells for c in r):
        raise ValueError("all grid images must share a size")
    H, W = grid_canvas_size(len(rows), ncols, h, w)
    sep = GRID_SEPARATOR
    canvas = np.empty((H, W, 3), dtype=np.uint8)
    canvas[:] = GRID_SEPARATOR_COLOR
    # the box occupies the separator band surrounding row 0
    canvas[: h + 2 * sep, :] = GRID_BOX_COLOR
    for i, r in enumerate(cells):
        y = sep + i * (h + sep)
        for j, cell in enumerate(r):
            x = sep + j * (w + sep)
            canvas[y:y + h, x:x + w] = cell
    # vertical separators inside the boxed row stay neutral
    for j in range(1, ncols):
        x = j * (w + sep)
        canvas[sep:sep + h, x:x + sep] = GRID_SEPARATOR_COLOR
    info = PngImagePlugin.PngInfo()
    for i, label in enumerate(row_labels or []):
        info.add_text(f"row{i}", str(label))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG", pnginfo=info)
    return path
