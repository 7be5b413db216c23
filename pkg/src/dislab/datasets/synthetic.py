"""Deterministic procedural triplet generators.

Two collections stand in for the external data: map-like scenes rendered in
toner/terrain/watercolor palettes, and stroke glyphs rendered plain, with
content noise, and on a colored textured background. Each generator is a pure
function of ``(seed, count, image_size)``; per-item randomness comes from
``default_rng([seed, index])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from .manifest import DatasetManifest, ManifestRecord

SUPPORTED_SIZES = (32, 64)

MAP_STYLES = ("toner", "terrain", "watercolor")
DIGIT_STYLES = ("plain", "noisy", "textured")

# geometry label ids
BACKGROUND, WATER, BLOCK, ROAD = 0, 1, 2, 3

MAP_PALETTES = {
    "toner": np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.35, 0.35, 0.35], [0.0, 0.0, 0.0]]),
    "terrain": np.array([[0.87, 0.90, 0.78], [0.60, 0.78, 0.90], [0.85, 0.75, 0.65], [0.98, 0.70, 0.30]]),
    "watercolor": np.array([[0.96, 0.92, 0.82], [0.45, 0.62, 0.85], [0.88, 0.58, 0.50], [0.58, 0.48, 0.44]]),
}
WATERCOLOR_NOISE = 0.08

DEFAULT_NOISE_SIGMA = 0.3


@dataclass
class SyntheticDataset:
    """Generated images keyed by ``(content_key, style_name)``, as uint8 HxWx3 arrays."""

    manifest: DatasetManifest
    images: dict[tuple[str, str], np.ndarray]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, np.ndarray] = field(default_factory=dict)


def _check_args(count: int, image_size: int) -> None:
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    if image_size not in SUPPORTED_SIZES:
        raise ConfigurationError(f"image_size must be one of {SUPPORTED_SIZES}, got {image_size}")


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return xs, ys


def segment_distance(xs: np.ndarray, ys: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distance from every pixel center to the nearest segment of a polyline."""
    best = np.full(xs.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        dx, dy = x1 - x0, y1 - y0
        length2 = dx * dx + dy * dy
        if length2 == 0:
            t = np.zeros_like(xs)
        else:
            t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / length2, 0.0, 1.0)
        d = np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))
        np.minimum(best, d, out=best)
    return best


def upsampled_noise(rng: np.random.Generator, size: int, cells: int, channels: int) -> np.ndarray:
    """Bilinearly upsampled uniform noise in [-1, 1]; low frequency for small ``cells``."""
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1, channels))
    pos = (np.arange(size) + 0.5) / size * cells
    i0 = np.minimum(pos.astype(int), cells - 1)
    f = (pos - i0)[:, None]
    rows = grid[i0] * (1 - f)[:, :, None] + grid[i0 + 1] * f[:, :, None]
    cols = rows[:, i0] * (1 - f.T)[:, :, None] + rows[:, i0 + 1] * f.T[:, :, None]
    return cols


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------- maps

def map_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Label raster of one scene: optional water disc, blocks, then roads on top."""
    labels = np.zeros((size, size), dtype=np.uint8)
    xs, ys = _pixel_grid(size)
    if rng.random() < 0.5:
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(size / 8, size / 4)
        labels[np.hypot(xs - cx, ys - cy) < r] = WATER
    for _ in range(rng.integers(1, 7)):
        w, h = rng.integers(size // 8, size // 3 + 1, 2)
        x0, y0 = rng.integers(0, size - w + 1), rng.integers(0, size - h + 1)
        labels[y0:y0 + h, x0:x0 + w] = BLOCK
    width = size / 16
    for _ in range(rng.integers(2, 6)):
        n = rng.integers(2, 5)
        start_edge = rng.integers(0, 2)
        pts = rng.uniform(0, size, size=(n, 2))
        # anchor the first point on an image edge so roads cross the tile
        pts[0, start_edge] = 0.0 if rng.random() < 0.5 else float(size)
        d = segment_distance(xs, ys, pts)
        labels[d < width / 2 + 0.5] = ROAD
    return labels


def render_map(labels: np.ndarray, style: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Render a label raster in one palette; watercolor needs ``rng`` for its wash."""
    image = MAP_PALETTES[style][labels]
    if style == "watercolor":
        if rng is None:
            raise ValueError("watercolor rendering needs an rng")
        size = labels.shape[0]
        wash = upsampled_noise(rng, size, 3, 3) * WATERCOLOR_NOISE
        wash += upsampled_noise(rng, size, 8, 1) * (WATERCOLOR_NOISE / 2)
        image = image + wash
    return to_uint8(image)


def estimate_map_geometry(image: np.ndarray, style: str) -> np.ndarray:
    """Binary geometry layer of a map image by nearest palette colour.

    Accepts float images in [0, 1] or uint8, with channels last or first.
    """
    raw = np.asarray(image)
    img = raw.astype(np.float64)
    if raw.dtype == np.uint8:
        img /= 255.0
    if img.shape[0] == 3 and img.shape[-1] != 3:
        img = np.moveaxis(img, 0, -1)
    palette = MAP_PALETTES[style]
    d = ((img[:, :, None, :] - palette[None, None]) ** 2).sum(-1)
    return d.argmin(-1) != BACKGROUND


def generate_synthetic_map_triplets(seed: int, count: int, image_size: int = 64) -> SyntheticDataset:
    _check_args(count, image_size)
    images, masks, all_labels, records = {}, {}, {}, []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        key = f"m{i:05d}"
        labels = map_scene(rng, image_size)
        all_labels[key] = labels
        masks[key] = labels != BACKGROUND
        for style in MAP_STYLES:
            images[key, style] = render_map(labels, style, rng)
            records.append(ManifestRecord(key, style, f"{style}/{key}.png"))
    manifest = DatasetManifest(list(MAP_STYLES), records, image_size, 3, mask_dir="masks")
    return SyntheticDataset(manifest, images, masks, all_labels)


# ---------------------------------------------------------------- digits

def _circle(cx, cy, r, n=14):
    t = np.linspace(0, 2 * np.pi, n + 1)
    return np.stack([cx + r * np.cos(t), cy + r * 0.95 * np.sin(t)], 1)


# strokes in a unit box, y pointing down
GLYPHS: list[list[np.ndarray]] = [
    [_circle(0.5, 0.5, 0.32)],
    [np.array([[0.35, 0.25], [0.52, 0.1], [0.52, 0.9]])],
    [np.array([[0.2, 0.3], [0.35, 0.12], [0.65, 0.12], [0.8, 0.3], [0.2, 0.88], [0.82, 0.88]])],
    [np.array([[0.2, 0.14], [0.8, 0.14], [0.45, 0.48], [0.78, 0.62], [0.65, 0.88], [0.2, 0.85]])],
    [np.array([[0.65, 0.9], [0.65, 0.1], [0.15, 0.65], [0.85, 0.65]])],
    [np.array([[0.8, 0.12], [0.27, 0.12], [0.22, 0.46], [0.65, 0.44], [0.8, 0.65], [0.65, 0.88], [0.2, 0.86]])],
    [np.array([[0.7, 0.1], [0.32, 0.42], [0.22, 0.72], [0.4, 0.9], [0.68, 0.86], [0.75, 0.62], [0.5, 0.5], [0.26, 0.62]])],
    [np.array([[0.15, 0.12], [0.85, 0.12], [0.42, 0.9]])],
    [_circle(0.5, 0.3, 0.18), _circle(0.5, 0.69, 0.22)],
    [_circle(0.5, 0.32, 0.2), np.array([[0.7, 0.35], [0.56, 0.9]])],
]


def render_glyph(symbol: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Anti-aliased white-on-black glyph intensity in [0, 1] under a random affine."""
    angle = rng.uniform(-0.25, 0.25)
    shear = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.62, 0.78) * size
    shift = size / 2 + rng.uniform(-0.06, 0.06, 2) * size
    width = rng.uniform(0.07, 0.11) * size
    c, s = np.cos(angle), np.sin(angle)
    A = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    xs, ys = _pixel_grid(size)
    d = np.full(xs.shape, np.inf)
    for stroke in GLYPHS[symbol]:
        pts = (stroke - 0.5) @ A.T + shift
        d = np.minimum(d, segment_distance(xs, ys, pts))
    # quarter-pixel anti-aliasing ramp around the stroke edge
    return np.clip((width / 2 - d) * 4.0 + 0.5, 0.0, 1.0)


def add_content_noise(image: np.ndarray, glyph_mask: np.ndarray, sigma: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Add N(0, sigma^2) noise to pixels under ``glyph_mask`` and clamp to [0, 1].

    ``image`` is float, ``(H, W)`` or ``(H, W, C)``; ``glyph_mask`` is ``(H, W)``.
    One noise value per pixel is shared across channels.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(glyph_mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    noise = rng.normal(0.0, 1.0, size=mask.shape) * sigma * mask
    if image.ndim == 3:
        noise = noise[:, :, None]
    return np.where(mask if image.ndim == 2 else mask[:, :, None],
                    np.clip(image + noise, 0.0, 1.0), image)


def _textured(glyph: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = glyph.shape[0]
    bg = rng.uniform(0.25, 0.7, 3)
    hue_shift = rng.uniform(-1, 1, 3)
    fg = np.clip(bg + np.sign(hue_shift + 1e-9) * rng.uniform(0.25, 0.45, 3), 0.0, 1.0)
    background = bg + upsampled_noise(rng, size, 4, 3) * 0.12 + upsampled_noise(rng, size, 16, 1) * 0.04
    a = glyph[:, :, None]
    return np.clip(background * (1 - a) + fg * a, 0.0, 1.0)


def generate_synthetic_digit_triplets(seed: int, count: int, image_size: int = 32,
                                      noise_sigma: float = DEFAULT_NOISE_SIGMA) -> SyntheticDataset:
    _check_args(count, image_size)
    images, masks, symbols, records = {}, {}, {}, []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        symbol = int(rng.integers(0, 10))
        key = f"d{i:05d}_{symbol}"
        glyph = render_glyph(symbol, rng, image_size)
        mask = glyph > 0
        plain = np.repeat(glyph[:, :, None], 3, axis=2)
        noisy = add_content_noise(plain, mask, noise_sigma, rng)
        images[key, "plain"] = to_uint8(plain)
        images[key, "noisy"] = to_uint8(noisy)
        images[key, "textured"] = to_uint8(_textured(glyph, rng))
        masks[key] = mask
        symbols[key] = np.array(symbol)
        records.extend(ManifestRecord(key, s, f"{s}/{key}.png") for s in DIGIT_STYLES)
    manifest = DatasetManifest(list(DIGIT_STYLES), records, image_size, 3, mask_dir="masks")
    return SyntheticDataset(manifest, images, masks, symbols)


def generate(kind: str, seed: int, count: int, image_size: int) -> SyntheticDataset:
    if kind == "map":
        return generate_synthetic_map_triplets(seed, count, image_size)
    if kind == "digit":
        return generate_synthetic_digit_triplets(seed, count, image_size)
    raise ConfigurationError(f"unknown dataset kind {kind!r}; expected 'map' or 'digit'")
