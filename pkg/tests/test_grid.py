import numpy as np
import pytest
from pydantic import ValidationError

from src.exceptions import ArgumentError
from src.grid import GridSpec, TileCoord, cell_of_latlon, cells_of_latlon, neighbours8, tile_of_cell

FULL_GRID = GridSpec(height=1152, width=2304, tile=144)


def neighbour_oracle(r, c, h, w):
    """Offsets walked one by one; stepping past a pole lands on the same row, half a globe away."""
    out = []
    for dr, dc in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]:
        rr = r + dr
        if rr < 0 or rr >= h:
            out.append((r, (c - dc + w // 2) % w))
        else:
            out.append((rr, (c + dc) % w))
    return out


def test_interior_neighbours():
    got = neighbours8((3, 5), 8, 16)
    expected = [(2, 4), (2, 5), (2, 6), (3, 4), (3, 6), (4, 4), (4, 5), (4, 6)]
    assert got == expected, f"Expected {expected}, got {got}"
    assert all(isinstance(t, TileCoord) for t in got)


def test_top_row_neighbours():
    got = neighbours8((0, 0), 8, 16)
    expected = [(0, 9), (0, 8), (0, 7), (0, 15), (0, 1), (1, 15), (1, 0), (1, 1)]
    assert got == expected, f"Expected {expected}, got {got}"


def test_bottom_row_neighbours():
    got = neighbours8((7, 15), 8, 16)
    expected = [(6, 14), (6, 15), (6, 0), (7, 14), (7, 0), (7, 8), (7, 7), (7, 6)]
    assert got == expected, f"Expected {expected}, got {got}"


@pytest.mark.parametrize("h,w", [(2, 4), (4, 8), (8, 16), (2, 16), (8, 4)])
def test_neighbours_match_oracle_everywhere(h, w):
    for r in range(h):
        for c in range(w):
            got = [tuple(t) for t in neighbours8((r, c), h, w)]
            assert got == neighbour_oracle(r, c, h, w), f"Mismatch at ({r}, {c}) on {h}x{w}"
            assert all(0 <= rr < h and 0 <= cc < w for rr, cc in got), f"Out of bounds at ({r}, {c})"


def test_interior_neighbour_relation_is_symmetric():
    h, w = 8, 16
    for r in range(1, h - 1):
        for c in range(w):
            for nb in neighbours8((r, c), h, w):
                if 1 <= nb.r <= h - 2:
                    assert (r, c) in neighbours8(nb, h, w), f"({r}, {c}) -> {nb} is not symmetric"


def test_top_row_up_neighbours_cross_the_pole():
    h, w = 4, 8
    for c in range(w):
        ups = neighbours8((0, c), h, w)[:3]
        assert all(t.r == 0 for t in ups)
        expected = {(c - 1 + w // 2) % w, (c + w // 2) % w, (c + 1 + w // 2) % w}
        assert {t.c for t in ups} == expected, f"Column {c}: {ups}"


@pytest.mark.parametrize("coord,h,w", [((8, 0), 8, 16), ((0, 16), 8, 16), ((-1, 0), 8, 16), ((0, 0), 8, 15), ((0, 0), 1, 16)])
def test_neighbours_reject_bad_input(coord, h, w):
    with pytest.raises(ArgumentError):
        neighbours8(coord, h, w)


def test_tile_of_cell():
    assert tile_of_cell(0, 0, FULL_GRID) == (0, 0)
    assert tile_of_cell(143, 143, FULL_GRID) == (0, 0)
    assert tile_of_cell(144, 2303, FULL_GRID) == (1, 15)
    with pytest.raises(ArgumentError):
        tile_of_cell(1152, 0, FULL_GRID)


def test_cell_of_latlon_examples():
    assert cell_of_latlon(90.0, -180.0, FULL_GRID) == (0, 0)
    assert cell_of_latlon(0.0, 0.0, FULL_GRID) == (576, 1152)
    assert cell_of_latlon(-90.0, 179.999, FULL_GRID) == (1151, 2303)


def test_cell_of_latlon_rejects_nan():
    with pytest.raises(ArgumentError):
        cell_of_latlon(float("nan"), 0.0, FULL_GRID)


def test_cells_agree_with_nearest_center_search():
    spec = GridSpec(height=24, width=48, tile=12)
    rng = np.random.default_rng(0)
    lats = rng.uniform(-90, 90, 10_000)
    lons = rng.uniform(-180, 180, 10_000)
    rows, cols = cells_of_latlon(lats, lons, spec)

    center_lats, center_lons = spec.cell_centers()
    brute_rows = np.argmin(np.abs(lats[:, None] - center_lats[None, :]), axis=1)
    lon_gap = np.abs(lons[:, None] - center_lons[None, :])
    brute_cols = np.argmin(np.minimum(lon_gap, 360.0 - lon_gap), axis=1)
    assert np.array_equal(rows, brute_rows), "Row assignment differs from nearest-center search"
    assert np.array_equal(cols, brute_cols), "Column assignment differs from nearest-center search"


def test_every_point_lands_in_one_tile():
    spec = GridSpec(height=96, width=192, tile=24)
    rng = np.random.default_rng(1)
    rows, cols = cells_of_latlon(rng.uniform(-90, 90, 2000), rng.uniform(-180, 180, 2000), spec)
    tiles = [tile_of_cell(int(r), int(c), spec) for r, c in zip(rows, cols)]
    assert all(0 <= t.r < spec.tiles_h and 0 <= t.c < spec.tiles_w for t in tiles)


def test_longitudes_wrap():
    spec = GridSpec(height=24, width=48, tile=12)
    assert cell_of_latlon(0.0, 180.0, spec) == cell_of_latlon(0.0, -180.0, spec)
    assert cell_of_latlon(0.0, -1e-12, spec)[1] == 23


@pytest.mark.parametrize("h,w,tile", [(100, 200, 24), (24, 36, 12), (0, 48, 12)])
def test_gridspec_rejects_bad_tiling(h, w, tile):
    with pytest.raises(ValidationError):
        GridSpec(height=h, width=w, tile=tile)


def test_gridspec_derived_sizes():
    assert FULL_GRID.tiles_h == 8
    assert FULL_GRID.tiles_w == 16
    assert FULL_GRID.lat_step == pytest.approx(0.15625)
    assert len(FULL_GRID.tile_coords()) == 128
