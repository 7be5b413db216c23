from .fetch import (
    FetchJob,
    FetchLockedError,
    FetchReport,
    RateLimiter,
    align_triplets,
    fetch_tiles,
    tile_manifest,
    validate_png,
)
from .mercator import (
    MAX_LATITUDE,
    BBox,
    TileCoord,
    lonlat_to_tile,
    parse_tile_filename,
    parse_tile_key,
    tile_filename,
    tile_range,
    tile_to_bbox,
    tiles_in_region,
)

__all__ = [
    "BBox",
    "FetchJob",
    "FetchLockedError",
    "FetchReport",
    "MAX_LATITUDE",
    "RateLimiter",
    "TileCoord",
    "align_triplets",
    "fetch_tiles",
    "lonlat_to_tile",
    "parse_tile_filename",
    "parse_tile_key",
    "tile_filename",
    "tile_manifest",
    "tile_range",
    "tile_to_bbox",
    "tiles_in_region",
    "validate_png",
]
