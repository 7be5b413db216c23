"""Polite, cached tile downloading into ``{output_dir}/{style}/{x}-{y}-{z}.png``."""

from __future__ import annotations

import io
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import requests
from filelock import FileLock, Timeout
from PIL import Image

from ..datasets.manifest import DatasetManifest, ManifestRecord, manifest_from_style_dirs
from .mercator import MAX_LATITUDE, TILE_SIZE, BBox, TileCoord, tile_filename, tiles_in_region

log = logging.getLogger(__name__)

LOCK_NAME = ".fetch.lock"
USER_AGENT = "dislab-tile-fetcher/0.1"


class FetchLockedError(RuntimeError):
    pass


@dataclass
class FetchJob:
    server_template: str
    style_name: str
    region: BBox
    zoom: int
    output_dir: Path
    max_concurrency: int = 4
    min_request_interval: float = 0.1
    tile_size: int = TILE_SIZE
    max_retries: int = 3
    backoff_base: float = 0.5
    timeout: float = 30.0
    lock_timeout: float = 10.0
    query: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        self.region = BBox(*self.region)
        w, s, e, n = self.region
        if not (-180 <= w <= e <= 180):
            raise ValueError(f"region longitudes {w}..{e} outside [-180, 180] or reversed")
        if not (-MAX_LATITUDE <= s <= n <= MAX_LATITUDE):
            raise ValueError(f"region latitudes {s}..{n} outside Mercator bounds or reversed")
        for ph in ("{x}", "{y}", "{z}"):
            if ph not in self.server_template:
                raise ValueError(f"server_template lacks the {ph} placeholder")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.min_request_interval < 0:
            raise ValueError("min_request_interval must be >= 0")

    def url(self, t: TileCoord) -> str:
        return self.server_template.format(x=t.x, y=t.y, z=t.z)

    def tile_path(self, t: TileCoord) -> Path:
        return self.output_dir / self.style_name / tile_filename(t)


class RateLimiter:
    """Spaces request starts at least ``interval`` seconds apart across threads."""

    def __init__(self, interval: float):
        self.interval = interval
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            time.sleep(start - now)


@dataclass
class FetchReport:
    style_name: str
    present: list[TileCoord]
    missing: list[TileCoord]
    invalid: list[TileCoord]
    cached: int
    network_requests: int
    manifest: DatasetManifest


def validate_png(blob: bytes, size: int) -> bool:
    try:
        with Image.open(io.BytesIO(blob)) as im:
            if im.format != "PNG" or im.size != (size, size):
                return False
            im.load()
    except Exception:
        return False
    return True


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{threading.get_ident()}.part")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class _Fetcher:
    def __init__(self, job: FetchJob):
        self.job = job
        self.limiter = RateLimiter(job.min_request_interval)
        self.local = threading.local()
        self.lock = threading.Lock()
        self.requests = 0

    def session(self) -> requests.Session:
        s = getattr(self.local, "session", None)
        if s is None:
            s = self.local.session = requests.Session()
            s.headers["User-Agent"] = USER_AGENT
        return s

    def get(self, url: str) -> requests.Response:
        self.limiter.wait()
        with self.lock:
            self.requests += 1
        return self.session().get(url, params=self.job.query or None, timeout=self.job.timeout)

    def fetch(self, t: TileCoord) -> str:
        """Return 'ok', 'missing' or 'invalid' for one tile."""
        job = self.job
        url = job.url(t)
        for attempt in range(job.max_retries + 1):
            try:
                resp = self.get(url)
                if resp.status_code == 200:
                    if not validate_png(resp.content, job.tile_size):
                        log.warning("discarding invalid PNG for %s from %s", t.key, url)
                        return "invalid"
                    _atomic_write(job.tile_path(t), resp.content)
                    return "ok"
                log.info("HTTP %d for %s (attempt %d)", resp.status_code, url, attempt + 1)
            except requests.RequestException as e:
                log.info("request error for %s (attempt %d): %s", url, attempt + 1, e)
            if attempt < job.max_retries:
                time.sleep(job.backoff_base * (2 ** attempt))
        log.warning("giving up on %s after %d attempts", url, job.max_retries + 1)
        return "missing"


def fetch_tiles(job: FetchJob) -> FetchReport:
    """Download every tile covering ``job.region`` at ``job.zoom`` that is not cached yet."""
    job.output_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(job.output_dir / LOCK_NAME))
    try:
        lock.acquire(timeout=job.lock_timeout)
    except Timeout as e:
        raise FetchLockedError(f"another fetch holds {job.output_dir / LOCK_NAME}") from e
    try:
        tiles = tiles_in_region(job.region, job.zoom)
        cached = [t for t in tiles if job.tile_path(t).exists()]
        todo = [t for t in tiles if not job.tile_path(t).exists()]
        fetcher = _Fetcher(job)
        with ThreadPoolExecutor(max_workers=job.max_concurrency) as pool:
            outcomes = dict(zip(todo, pool.map(fetcher.fetch, todo)))
    finally:
        lock.release()
    present = sorted(cached + [t for t, o in outcomes.items() if o == "ok"])
    missing = sorted(t for t, o in outcomes.items() if o != "ok")
    invalid = sorted(t for t, o in outcomes.items() if o == "invalid")
    records = [ManifestRecord(t.key, job.style_name, f"{job.style_name}/{tile_filename(t)}") for t in present]
    manifest = DatasetManifest([job.style_name], records, job.tile_size, 3)
    return FetchReport(job.style_name, present, missing, invalid, len(cached), fetcher.requests, manifest)


def align_triplets(style_dirs: Sequence[tuple[str, str | Path]]) -> list[str]:
    """Tile keys (filename stems) present in every style directory, sorted."""
    if len(style_dirs) < 2:
        raise ValueError("align_triplets needs at least two style directories")
    common: set[str] | None = None
    for _, d in style_dirs:
        stems = {name[:-4] for name in os.listdir(d) if name.endswith(".png") and not name.startswith(".")}
        common = stems if common is None else common & stems
    return sorted(common or ())


def tile_manifest(output_dir: str | Path, style_names: Sequence[str], tile_size: int = TILE_SIZE) -> DatasetManifest:
    """Manifest over the tiles that every style has, for use with the triplet loader."""
    keys = align_triplets([(s, Path(output_dir) / s) for s in style_names])
    return manifest_from_style_dirs(list(style_names), keys, tile_size, 3)
