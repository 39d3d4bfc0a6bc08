from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
import logging

import numpy as np
from einops import rearrange
from pydantic import BaseModel, model_validator

from src.exceptions import ArgumentError, DawpError, FormatError
from src.grid import GridSpec
from src.obsio import GriddedField, merge_time, read_grid

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"


class Manifest(BaseModel):
    """Dataset description written by gen-data. Hour ranges are half-open."""

    grid: GridSpec
    modalities: Dict[str, int]
    hours: int
    train_hours: Tuple[int, int]
    test_hours: Tuple[int, int]
    time_window: int
    with_precip: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check_split(self) -> "Manifest":
        a, b = self.train_hours
        c, d = self.test_hours
        if not (0 <= a <= b <= c <= d <= self.hours):
            raise ValueError(f"train {self.train_hours} and test {self.test_hours} must be ordered and disjoint within {self.hours} hours")
        return self


def split_hours(hours: int, train_fraction: float) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Disjoint train/test periods: the first `train_fraction` of hours trains, the rest tests."""
    if not 0.0 < train_fraction < 1.0:
        raise ArgumentError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    split_index = int(hours * train_fraction)
    return (0, split_index), (split_index, hours)


def write_manifest(manifest: Manifest, data_dir: Union[str, Path]) -> Path:
    path = Path(data_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"height:{manifest.grid.height}",
        f"width:{manifest.grid.width}",
        f"tile:{manifest.grid.tile}",
        "modalities:" + ",".join(f"{name}={c}" for name, c in manifest.modalities.items()),
        f"hours:{manifest.hours}",
        f"train_hours:{manifest.train_hours[0]},{manifest.train_hours[1]}",
        f"test_hours:{manifest.test_hours[0]},{manifest.test_hours[1]}",
        f"time_window:{manifest.time_window}",
        f"with_precip:{str(manifest.with_precip).lower()}",
        f"seed:{manifest.seed}",
    ]
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Manifest saved to: {path}")
    return path


def read_manifest(data_dir: Union[str, Path]) -> Manifest:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise FormatError("manifest not found", path=str(path))
    pairs: Dict[str, str] = {}
    offset = 0
    for line in path.read_text().splitlines(keepends=True):
        key, sep, value = line.strip().partition(":")
        if line.strip() and not sep:
            raise FormatError(f"line without ':' ({line.strip()!r})", offset=offset, path=str(path))
        if sep:
            pairs[key] = value
        offset += len(line.encode("utf-8"))
    try:
        modalities = {}
        for item in pairs["modalities"].split(","):
            name, _, channels = item.partition("=")
            modalities[name] = int(channels)
        return Manifest(
            grid=GridSpec(height=int(pairs["height"]), width=int(pairs["width"]), tile=int(pairs["tile"])),
            modalities=modalities,
            hours=int(pairs["hours"]),
            train_hours=tuple(int(v) for v in pairs["train_hours"].split(",")),
            test_hours=tuple(int(v) for v in pairs["test_hours"].split(",")),
            time_window=int(pairs["time_window"]),
            with_precip=pairs.get("with_precip", "false") == "true",
            seed=int(pairs.get("seed", "0")),
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"invalid manifest: {e}", path=str(path))


def hourly_path(data_dir: Union[str, Path], modality: str, hour: int) -> Path:
    return Path(data_dir) / modality / f"hour_{hour:05d}.grd"


def truth_path(data_dir: Union[str, Path], name: str) -> Path:
    return Path(data_dir) / f"truth_{name}.grd"


def load_modality(data_dir: Union[str, Path], modality: str, hours: Iterable[int], jobs: int = 1) -> GriddedField:
    """Read the hourly files of one modality and stack them along T."""
    hours = list(hours)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        frames = list(pool.map(lambda t: read_grid(hourly_path(data_dir, modality, t)), hours))
    return merge_time(frames)


def load_truth(data_dir: Union[str, Path], name: str, hours: Optional[Sequence[int]] = None) -> GriddedField:
    field = read_grid(truth_path(data_dir, name))
    return field.select_hours(hours) if hours is not None else field


def split_tiles(data: np.ndarray, tile: int) -> np.ndarray:
    """[T, C, H, W] -> [tiles_h, tiles_w, T, C, tile, tile]."""
    if data.ndim != 4 or data.shape[2] % tile or data.shape[3] % tile:
        raise ArgumentError(f"cannot cut {data.shape} into {tile}x{tile} tiles")
    return rearrange(data, "t c (i h) (j w) -> i j t c h w", h=tile, w=tile)


def merge_tiles(tiles: np.ndarray) -> np.ndarray:
    """[tiles_h, tiles_w, T, C, tile, tile] -> [T, C, H, W]."""
    if tiles.ndim != 6:
        raise ArgumentError(f"expected 6-d tile array, got {tiles.shape}")
    return rearrange(tiles, "i j t c h w -> t c (i h) (j w)")


def window_starts(hour_range: Tuple[int, int], length: int, stride: int = 1) -> List[int]:
    """Start hours of every `length`-hour window inside a half-open hour range."""
    start, end = hour_range
    return list(range(start, end - length + 1, stride))


def validate_dataset(data_dir: Union[str, Path]) -> bool:
    """
    Check that every file the manifest implies exists and matches the grid.

    Args:
    data_dir: Dataset directory written by gen-data

    Returns:
    True if the dataset is complete and consistent, False otherwise
    """
    try:
        manifest = read_manifest(data_dir)
    except DawpError as e:
        logger.error(f"Error: {e}")
        return False
    grid = manifest.grid
    for name, channels in manifest.modalities.items():
        expected = (channels, grid.height, grid.width)
        for hour in range(manifest.hours):
            path = hourly_path(data_dir, name, hour)
            if not path.exists():
                logger.error(f"Error: missing {path}")
                return False
            try:
                field = read_grid(path)
            except DawpError as e:
                logger.error(f"Error: {e}")
                return False
            if field.data.shape[1:] != expected or field.timestamps != [hour]:
                logger.error(f"Error: {path} holds {field.data.shape} at hours {field.timestamps}")
                return False
        path = truth_path(data_dir, name)
        if not path.exists():
            logger.error(f"Error: missing {path}")
            return False
    if manifest.with_precip and not truth_path(data_dir, "precip").exists():
        logger.error(f"Error: missing {truth_path(data_dir, 'precip')}")
        return False
    return True
