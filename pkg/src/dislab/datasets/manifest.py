from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ManifestRecord:
    content_key: str
    style_name: str
    relative_path: str
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")


@dataclass
class DatasetManifest:
    style_names: list[str]
    records: list[ManifestRecord]
    image_size: int
    channels: int = 3
    version: int = MANIFEST_VERSION
    mask_dir: str | None = None

    def content_keys(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.content_key, None)
        return list(seen)

    def by_key(self) -> dict[str, list[ManifestRecord]]:
        groups: dict[str, list[ManifestRecord]] = defaultdict(list)
        for r in self.records:
            groups[r.content_key].append(r)
        return dict(groups)

    def validate(self) -> None:
        """Strict check: every key appears once per style, with a single split."""
        if len(set(self.style_names)) != len(self.style_names):
            raise ValueError(f"duplicate style names in {self.style_names}")
        styles = set(self.style_names)
        for key, recs in self.by_key().items():
            names = [r.style_name for r in recs]
            if sorted(names) != sorted(styles):
                raise ValueError(f"content_key {key!r} has styles {names}, expected {sorted(styles)}")
            if len({r.split for r in recs}) != 1:
                raise ValueError(f"content_key {key!r} is split across train and test")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "style_names": list(self.style_names),
            "image_size": self.image_size,
            "channels": self.channels,
            "mask_dir": self.mask_dir,
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("version")
        if version != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {version!r}")
        return cls(
            style_names=list(d["style_names"]),
            records=[ManifestRecord(**r) for r in d["records"]],
            image_size=int(d["image_size"]),
            channels=int(d.get("channels", 3)),
            version=version,
            mask_dir=d.get("mask_dir"),
        )

    def write(self, root: str | Path) -> Path:
        path = Path(root) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def read(cls, root: str | Path) -> "DatasetManifest":
        path = Path(root)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls.from_dict(json.loads(path.read_text()))

    def keys_in_split(self, split: str) -> list[str]:
        return [k for k, recs in self.by_key().items() if recs[0].split == split]


def split_train_test(manifest: DatasetManifest, ratio=(3, 1), seed: int = 0) -> DatasetManifest:
    """Assign whole content keys to train/test so all styles of a key share a split."""
    train_parts, test_parts = ratio
    if train_parts < 0 or test_parts < 0 or train_parts + test_parts == 0:
        raise ValueError(f"invalid ratio {ratio}")
    keys = sorted(manifest.content_keys())
    if not keys:
        raise ValueError("cannot split an empty manifest")
    n_train = round(len(keys) * train_parts / (train_parts + test_parts))
    order = np.random.default_rng(seed).permutation(len(keys))
    train_keys = {keys[i] for i in order[:n_train]}
    records = [replace(r, split="train" if r.content_key in train_keys else "test")
               for r in manifest.records]
    return replace(manifest, records=records)


def manifest_from_style_dirs(style_names: list[str], keys: list[str],
                             image_size: int, channels: int = 3) -> DatasetManifest:
    """Manifest for an external dataset laid out as ``{style}/{content_key}.png``."""
    records = [ManifestRecord(k, s, f"{s}/{k}.png") for k in keys for s in style_names]
    return DatasetManifest(list(style_names), records, image_size, channels)


__all__ = [
    "DatasetManifest",
    "ManifestRecord",
    "MANIFEST_NAME",
    "manifest_from_style_dirs",
    "split_train_test",
]
