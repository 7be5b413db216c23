from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from ..models import StyleLabel
from .manifest import DatasetManifest
from .synthetic import SyntheticDataset

log = logging.getLogger(__name__)


class MissingImageError(FileNotFoundError):
    def __init__(self, content_key: str, style_name: str, path: Path):
        super().__init__(f"missing image for content_key={content_key!r} style={style_name!r}: {path}")
        self.content_key = content_key
        self.style_name = style_name


@dataclass
class ImageTriplet:
    content_key: str
    images: torch.Tensor  # (K, C, H, W), float in [0, 1]
    styles: tuple[StyleLabel, ...]

    def __post_init__(self):
        names = [s.name for s in self.styles]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate styles in triplet {self.content_key}: {names}")
        if self.images.shape[0] != len(self.styles):
            raise ValueError("one image per style required")


@dataclass
class TripletArray:
    """Stacked triplets: ``images`` is ``(N, K, C, H, W)`` ordered as ``style_names``."""

    images: torch.Tensor
    content_keys: list[str]
    style_names: list[str]
    masks: torch.Tensor | None = None  # (N, H, W) bool

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: Sequence[int]) -> "TripletArray":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return TripletArray(
            self.images[idx],
            [self.content_keys[i] for i in idx.tolist()],
            list(self.style_names),
            None if self.masks is None else self.masks[idx],
        )

    def flat(self) -> tuple[torch.Tensor, torch.Tensor]:
        """All images as one batch ``(N*K, C, H, W)`` with integer style labels."""
        n, k = self.images.shape[:2]
        labels = torch.arange(k).repeat(n)
        return self.images.reshape(n * k, *self.images.shape[2:]), labels

    @classmethod
    def from_triplets(cls, triplets: Sequence[ImageTriplet],
                      masks: dict[str, np.ndarray] | None = None) -> "TripletArray":
        if not triplets:
            raise ValueError("no triplets to stack")
        names = [s.name for s in triplets[0].styles]
        stacked = []
        for t in triplets:
            order = [[s.name for s in t.styles].index(n) for n in names]
            stacked.append(t.images[order])
        mask_t = None
        if masks:
            mask_t = torch.from_numpy(np.stack([masks[t.content_key] for t in triplets]).astype(bool))
        return cls(torch.stack(stacked), [t.content_key for t in triplets], names, mask_t)


def to_tensor_image(array: np.ndarray) -> torch.Tensor:
    """uint8 HxW or HxWxC to float CxHxW in [0, 1]; grayscale replicated to 3 channels."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    if a.shape[2] == 4:
        a = a[:, :, :3]
    return torch.from_numpy(a.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array)).save(path, format="PNG")


def write_dataset(root: str | Path, data: SyntheticDataset) -> Path:
    root = Path(root)
    by_path = {r.relative_path: (r.content_key, r.style_name) for r in data.manifest.records}
    for rel, (key, style) in by_path.items():
        write_png(root / rel, data.images[key, style])
    if data.manifest.mask_dir and data.masks:
        for key, mask in data.masks.items():
            write_png(root / data.manifest.mask_dir / f"{key}.png", mask.astype(np.uint8) * 255)
    return data.manifest.write(root)


def read_masks(manifest: DatasetManifest, root: str | Path, keys: Sequence[str]) -> dict[str, np.ndarray] | None:
    if not manifest.mask_dir:
        return None
    out = {}
    for key in keys:
        path = Path(root) / manifest.mask_dir / f"{key}.png"
        if not path.exists():
            return None
        with Image.open(path) as im:
            out[key] = np.asarray(im.convert("L")) > 127
    return out


@dataclass
class TripletSet:
    triplets: list[ImageTriplet]
    skipped: list[str] = field(default_factory=list)

    def __iter__(self) -> Iterator[ImageTriplet]:
        return iter(self.triplets)

    def __len__(self) -> int:
        return len(self.triplets)


def load_triplets(manifest: DatasetManifest, root: str | Path, split: str | None = "train",
                  seed: int | None = 0) -> TripletSet:
    """Read every complete triplet of ``split`` (``None`` for all) from disk.

    Order is a seeded permutation of the sorted content keys (sorted order when
    ``seed`` is None). Keys missing a style are skipped with a warning.
    """
    root = Path(root)
    labels = [StyleLabel(i, n) for i, n in enumerate(manifest.style_names)]
    groups = manifest.by_key()
    keys = sorted(groups)
    if seed is not None:
        keys = [keys[i] for i in np.random.default_rng(seed).permutation(len(keys))]
    result = TripletSet([])
    for key in keys:
        recs = groups[key]
        if split is not None and recs[0].split != split:
            continue
        have = {r.style_name: r for r in recs}
        if set(have) != set(manifest.style_names) or len(recs) != len(manifest.style_names):
            log.warning("skipping incomplete triplet %s: styles %s", key, sorted(have))
            result.skipped.append(key)
            continue
        images = []
        for label in labels:
            rec = have[label.name]
            path = root / rec.relative_path
            if not path.exists():
                raise MissingImageError(key, label.name, path)
            images.append(to_tensor_image(read_png(path)))
        result.triplets.append(ImageTriplet(key, torch.stack(images), tuple(labels)))
    return result


def load_triplet_array(manifest: DatasetManifest, root: str | Path, split: str | None = "train",
                       seed: int | None = None) -> TripletArray:
    triplets = load_triplets(manifest, root, split, seed).triplets
    masks = read_masks(manifest, root, [t.content_key for t in triplets])
    return TripletArray.from_triplets(triplets, masks)


def synthetic_to_arrays(data: SyntheticDataset) -> dict[str, TripletArray]:
    """In-memory equivalent of writing ``data`` and loading each split in key order."""
    manifest = data.manifest
    labels = tuple(StyleLabel(i, n) for i, n in enumerate(manifest.style_names))
    out = {}
    groups = manifest.by_key()
    for split in ("train", "test"):
        triplets = []
        for key in sorted(groups):
            if groups[key][0].split != split:
                continue
            imgs = torch.stack([to_tensor_image(data.images[key, s]) for s in manifest.style_names])
            triplets.append(ImageTriplet(key, imgs, labels))
        if triplets:
            out[split] = TripletArray.from_triplets(triplets, data.masks or None)
    return out
