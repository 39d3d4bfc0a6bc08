import numpy as np
import pytest
from pydantic import ValidationError

from src.data_processing import (
    Manifest,
    hourly_path,
    merge_tiles,
    read_manifest,
    split_hours,
    split_tiles,
    validate_dataset,
    window_starts,
    write_manifest,
)
from src.exceptions import ArgumentError, FormatError
from src.grid import GridSpec
from src.synthgen import FieldConfig, ModalityConfig, OrbitConfig, gen_dataset

SMALL_GRID = GridSpec(height=24, width=48, tile=12)


@pytest.fixture(scope="module")
def manifest():
    train, test = split_hours(20, 0.8)
    return Manifest(grid=SMALL_GRID, modalities={"amsua": 2}, hours=20, train_hours=train,
                    test_hours=test, time_window=4, with_precip=False, seed=5)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, manifest):
    out = tmp_path_factory.mktemp("dataset")
    modalities = {"amsua": ModalityConfig(channels=2, couplings=[(1.0, 0.0), (0.5, 0.5)],
                                          orbit=OrbitConfig(swath_width=4, period=6))}
    gen_dataset(modalities, FieldConfig(n_blobs=4), SMALL_GRID, hours=20, out_dir=out, seed=5)
    write_manifest(manifest, out)
    return out


def test_split_hours():
    assert split_hours(240, 0.8) == ((0, 192), (192, 240))
    with pytest.raises(ArgumentError):
        split_hours(240, 1.0)


def test_manifest_rejects_overlapping_split():
    with pytest.raises(ValidationError):
        Manifest(grid=SMALL_GRID, modalities={"a": 1}, hours=10, train_hours=(0, 6), test_hours=(5, 10), time_window=2)


def test_manifest_roundtrip(dataset_dir, manifest):
    loaded = read_manifest(dataset_dir)
    assert loaded == manifest, f"Manifest changed on disk: {loaded}"


def test_missing_manifest_is_a_format_error(tmp_path):
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


def test_validate_dataset(dataset_dir, tmp_path):
    assert validate_dataset(dataset_dir), f"Dataset at {dataset_dir} did not validate"
    assert not validate_dataset(tmp_path), "An empty directory must not validate"


def test_validate_dataset_catches_missing_hour(dataset_dir, tmp_path, manifest):
    broken = tmp_path / "broken"
    for path in dataset_dir.rglob("*"):
        if path.is_file():
            target = broken / path.relative_to(dataset_dir)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(path.read_bytes())
    hourly_path(broken, "amsua", 7).unlink()
    assert not validate_dataset(broken)


def test_tiles_roundtrip():
    data = np.arange(2 * 3 * 24 * 48, dtype=np.float32).reshape(2, 3, 24, 48)
    tiles = split_tiles(data, 12)
    assert tiles.shape == (2, 4, 2, 3, 12, 12)
    assert np.array_equal(tiles[1, 2], data[:, :, 12:24, 24:36])
    assert np.array_equal(merge_tiles(tiles), data)
    with pytest.raises(ArgumentError):
        split_tiles(data, 10)


def test_window_starts():
    assert window_starts((0, 10), 4) == [0, 1, 2, 3, 4, 5, 6]
    assert window_starts((0, 10), 4, stride=4) == [0, 4]
    assert window_starts((5, 8), 4) == []
