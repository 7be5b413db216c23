"""Slippy-map (xyz) tile arithmetic on the spherical Web Mercator projection.

y = 0 is the northern edge. Tiles are 256x256 pixels.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import NamedTuple

MAX_LATITUDE = math.degrees(math.atan(math.sinh(math.pi)))  # 85.0511287798...
MAX_ZOOM = 22
TILE_SIZE = 256

_FILENAME = re.compile(r"^(\d+)-(\d+)-(\d+)\.png$")


@dataclass(frozen=True, order=True)
class TileCoord:
    x: int
    y: int
    z: int

    def __post_init__(self):
        if not 0 <= self.z <= MAX_ZOOM:
            raise ValueError(f"zoom {self.z} outside [0, {MAX_ZOOM}]")
        n = 1 << self.z
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise ValueError(f"tile ({self.x}, {self.y}) outside the {n}x{n} grid at zoom {self.z}")

    @property
    def key(self) -> str:
        return f"{self.x}-{self.y}-{self.z}"


class BBox(NamedTuple):
    west: float
    south: float
    east: float
    north: float

    def center(self) -> tuple[float, float]:
        return (self.west + self.east) / 2, (self.south + self.north) / 2


def _check_lonlat(lon: float, lat: float) -> None:
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} outside [-180, 180]")
    if not -MAX_LATITUDE <= lat <= MAX_LATITUDE:
        raise ValueError(f"latitude {lat} outside Mercator bounds +/-{MAX_LATITUDE:.6f}")


def lonlat_to_tile(lon: float, lat: float, z: int) -> TileCoord:
    _check_lonlat(lon, lat)
    n = 1 << z
    phi = math.radians(lat)
    fx = (lon + 180.0) / 360.0 * n
    fy = (1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * n
    x = min(max(int(math.floor(fx)), 0), n - 1)
    y = min(max(int(math.floor(fy)), 0), n - 1)
    return TileCoord(x, y, z)


def _tile_lat(y: int, z: int) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y / (1 << z)))))


def tile_to_bbox(t: TileCoord) -> BBox:
    n = 1 << t.z
    west = t.x / n * 360.0 - 180.0
    east = (t.x + 1) / n * 360.0 - 180.0
    return BBox(west, _tile_lat(t.y + 1, t.z), east, _tile_lat(t.y, t.z))


def tile_filename(t: TileCoord) -> str:
    return f"{t.x}-{t.y}-{t.z}.png"


def parse_tile_filename(name: str) -> TileCoord:
    m = _FILENAME.match(name)
    if not m:
        raise ValueError(f"not a tile filename: {name!r}")
    x, y, z = (int(g) for g in m.groups())
    return TileCoord(x, y, z)


def parse_tile_key(key: str) -> TileCoord:
    return parse_tile_filename(key + ".png")


def tile_range(region: BBox, z: int) -> tuple[int, int, int, int]:
    """(x_min, y_min, x_max, y_max) from the projected NW and SE corners."""
    nw = lonlat_to_tile(region.west, region.north, z)
    se = lonlat_to_tile(region.east, region.south, z)
    return nw.x, nw.y, se.x, se.y


def tiles_in_region(region: BBox, z: int) -> list[TileCoord]:
    if region.west > region.east or region.south > region.north:
        raise ValueError(f"malformed region {region}")
    x0, y0, x1, y1 = tile_range(region, z)
    return [TileCoord(x, y, z) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]
