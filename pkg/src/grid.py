"""Equirectangular global grid, its tiling into sub-images, and tile neighbourhoods."""
from typing import List, NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from src.exceptions import ArgumentError


class GridSpec(BaseModel):
    """Equirectangular grid of `height` x `width` cells cut into square tiles of side `tile`."""

    model_config = ConfigDict(frozen=True)

    height: int
    width: int
    tile: int

    @model_validator(mode="after")
    def _check_tiling(self) -> "GridSpec":
        if self.height <= 0 or self.width <= 0 or self.tile <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.height % self.tile or self.width % self.tile:
            raise ValueError(f"tile {self.tile} does not divide grid {self.height}x{self.width}")
        if (self.width // self.tile) % 2:
            raise ValueError("tiles_w must be even for the polar wrap")
        return self

    @property
    def lat_step(self) -> float:
        return 180.0 / self.height

    @property
    def lon_step(self) -> float:
        return 360.0 / self.width

    @property
    def tiles_h(self) -> int:
        return self.height // self.tile

    @property
    def tiles_w(self) -> int:
        return self.width // self.tile

    def tile_coords(self) -> List["TileCoord"]:
        """All tiles in row-major order."""
        return [TileCoord(r, c) for r in range(self.tiles_h) for c in range(self.tiles_w)]

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        lats = 90.0 - (np.arange(self.height) + 0.5) * self.lat_step
        lons = -180.0 + (np.arange(self.width) + 0.5) * self.lon_step
        return lats, lons


class TileCoord(NamedTuple):
    r: int
    c: int


def _check_coord(coord: Tuple[int, int], tiles_h: int, tiles_w: int) -> Tuple[int, int]:
    r, c = int(coord[0]), int(coord[1])
    if not (0 <= r < tiles_h and 0 <= c < tiles_w):
        raise ArgumentError(f"tile coordinate {(r, c)} outside {tiles_h}x{tiles_w}")
    return r, c


def neighbours8(coord: Tuple[int, int], tiles_h: int, tiles_w: int) -> List[TileCoord]:
    """
    The 8 neighbours of a tile on the sphere, ordered
    [up_left, up, up_right, left, right, down_left, down, down_right].

    Columns wrap around the globe. A tile on the top (bottom) row takes its
    up (down) neighbours from the same row on the opposite side of the pole,
    with the left/right sense mirrored.
    """
    if tiles_h < 2:
        raise ArgumentError("neighbours8 needs at least 2 tile rows")
    if tiles_w % 2:
        raise ArgumentError(f"tiles_w must be even, got {tiles_w}")
    r, c = _check_coord(coord, tiles_h, tiles_w)
    w = tiles_w
    half = w // 2
    left = TileCoord(r, (c - 1) % w)
    right = TileCoord(r, (c + 1) % w)

    if r == 0:
        ups = [TileCoord(r, (c + 1 + half) % w), TileCoord(r, (c + half) % w), TileCoord(r, (c - 1 + half) % w)]
    else:
        ups = [TileCoord(r - 1, (c - 1) % w), TileCoord(r - 1, c), TileCoord(r - 1, (c + 1) % w)]

    if r == tiles_h - 1:
        downs = [TileCoord(r, (c + 1 + half) % w), TileCoord(r, (c + half) % w), TileCoord(r, (c - 1 + half) % w)]
    else:
        downs = [TileCoord(r + 1, (c - 1) % w), TileCoord(r + 1, c), TileCoord(r + 1, (c + 1) % w)]

    return ups + [left, right] + downs


def tile_of_cell(row: int, col: int, spec: GridSpec) -> TileCoord:
    if not (0 <= row < spec.height and 0 <= col < spec.width):
        raise ArgumentError(f"cell {(row, col)} outside {spec.height}x{spec.width}")
    return TileCoord(row // spec.tile, col // spec.tile)


def cells_of_latlon(lats: np.ndarray, lons: np.ndarray, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised nearest-cell assignment. Cells are half-open intervals, so a point
    on a boundary belongs to the cell with the larger index; latitudes are
    clamped at the poles and longitudes wrap.
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    if np.isnan(lats).any() or np.isnan(lons).any():
        raise ArgumentError("NaN latitude or longitude")
    if not (np.isfinite(lats).all() and np.isfinite(lons).all()):
        raise ArgumentError("non-finite latitude or longitude")
    rows = np.floor((90.0 - lats) * spec.height / 180.0).astype(np.int64)
    rows = np.clip(rows, 0, spec.height - 1)
    cols = np.floor(np.mod(lons + 180.0, 360.0) * spec.width / 360.0).astype(np.int64)
    # mod can round up to exactly 360 for tiny negative offsets
    cols = np.mod(cols, spec.width)
    return rows, cols


def cell_of_latlon(lat: float, lon: float, spec: GridSpec) -> Tuple[int, int]:
    rows, cols = cells_of_latlon(np.array([lat]), np.array([lon]), spec)
    return int(rows[0]), int(cols[0])
