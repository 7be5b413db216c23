"""Checkpoint directories: ``metadata.json`` plus one raw tensor file per name.

Tensor file layout (all little-endian): 8-byte magic, int64 rank, one int64
per dimension, then float32 data in C order.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError

MAGIC = b"DSLBTNSR"
FORMAT_VERSION = 1
METADATA = "metadata.json"
TENSOR_DIR = "tensors"


def encode_tensor(t: torch.Tensor) -> bytes:
    a = t.detach().cpu().numpy().astype("<f4", copy=False)
    header = MAGIC + struct.pack("<q", a.ndim) + struct.pack(f"<{a.ndim}q", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


def decode_tensor(blob: bytes, section: str) -> torch.Tensor:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise IntegrityError("bad magic or truncated header", section)
    (rank,) = struct.unpack_from("<q", blob, 8)
    if not 0 <= rank <= 8 or len(blob) < 16 + 8 * rank:
        raise IntegrityError(f"implausible rank {rank}", section)
    shape = struct.unpack_from(f"<{rank}q", blob, 16)
    offset = 16 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(blob) - offset != 4 * count:
        raise IntegrityError(
            f"expected {4 * count} data bytes for shape {list(shape)}, found {len(blob) - offset}", section
        )
    a = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
    return torch.from_numpy(a.astype(np.float32))


def _filename(name: str) -> str:
    return name.replace("/", ".") + ".bin"


def write_checkpoint_dir(path: str | Path, metadata: dict, tensors: dict[str, torch.Tensor]) -> Path:
    """Write atomically: build in a sibling temp dir, then swap into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / TENSOR_DIR).mkdir()
        index = {}
        for name, t in tensors.items():
            blob = encode_tensor(t)
            fname = _filename(name)
            (tmp / TENSOR_DIR / fname).write_bytes(blob)
            index[name] = {"file": fname, "shape": list(t.shape),
                           "sha256": hashlib.sha256(blob).hexdigest()}
        doc = dict(metadata, format_version=FORMAT_VERSION, tensors=index)
        (tmp / METADATA).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        if path.exists():
            old = path.with_name(path.name + ".old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_checkpoint_dir(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        meta = json.loads((path / METADATA).read_text())
    except FileNotFoundError as e:
        raise IntegrityError("missing", METADATA) from e
    except json.JSONDecodeError as e:
        raise IntegrityError(f"unparseable JSON ({e})", METADATA) from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format_version {meta.get('format_version')!r}", METADATA)
    tensors = {}
    for name, entry in meta.get("tensors", {}).items():
        section = f"{TENSOR_DIR}/{entry['file']}"
        try:
            blob = (path / TENSOR_DIR / entry["file"]).read_bytes()
        except FileNotFoundError as e:
            raise IntegrityError("missing tensor file", section) from e
        t = decode_tensor(blob, section)
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise IntegrityError("checksum mismatch", section)
        if list(t.shape) != entry["shape"]:
            raise IntegrityError(f"shape {list(t.shape)} differs from metadata {entry['shape']}", section)
        tensors[name] = t
    return meta, tensors
