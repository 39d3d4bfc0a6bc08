"""
Swath remapping onto the grid, per-modality normalisation, and the binary
file formats for swaths, gridded fields and checkpoints.
"""
from typing import Dict, List, Optional, Sequence, Tuple, Union
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
import logging
import struct

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from src.exceptions import ArgumentError, FormatError, StatisticsError
from src.grid import GridSpec, cells_of_latlon

logger = logging.getLogger(__name__)

GRID_MAGIC = b"DAWPGRD1"
SWATH_MAGIC = b"DAWPSWT1"
CKPT_MAGIC = b"DAWPCKPT"
_PREAMBLE = 12  # magic + u32 header length


class SwathBatch(BaseModel):
    """Irregular observation points from one sensor pass during one hour."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    modality: str
    hour: int = 0
    lats: np.ndarray
    lons: np.ndarray
    values: np.ndarray

    @field_validator("lats", "lons", mode="before")
    @classmethod
    def _as_f32_vector(cls, v):
        return np.ascontiguousarray(np.asarray(v, dtype=np.float32).reshape(-1))

    @field_validator("values", mode="before")
    @classmethod
    def _as_f32_matrix(cls, v):
        arr = np.asarray(v, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError("values must be [n_points, channels]")
        return np.ascontiguousarray(arr)

    @model_validator(mode="after")
    def _check_points(self) -> "SwathBatch":
        n = self.values.shape[0]
        if self.lats.shape[0] != n or self.lons.shape[0] != n:
            raise ValueError("lats, lons and values must have the same number of points")
        if self.values.shape[1] < 1:
            raise ValueError("a swath needs at least one channel")
        if n and (np.abs(self.lats) > 90).any():
            raise ValueError("latitude outside [-90, 90]")
        if n and not np.isfinite(self.lons).all():
            raise ValueError("non-finite longitude")
        return self

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_points(self) -> int:
        return int(self.values.shape[0])


class GriddedField(BaseModel):
    """[T, C, H, W] float32 observations, NaN where nothing was observed."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    modality: str
    data: np.ndarray
    timestamps: List[int]

    @field_validator("data", mode="before")
    @classmethod
    def _as_f32(cls, v):
        arr = np.asarray(v, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError("data must be [T, C, H, W]")
        return arr

    @model_validator(mode="after")
    def _check_time_axis(self) -> "GriddedField":
        if len(self.timestamps) != self.data.shape[0]:
            raise ValueError(f"{len(self.timestamps)} timestamps for {self.data.shape[0]} frames")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be strictly increasing")
        return self

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)

    def check_grid(self, spec: GridSpec) -> None:
        if self.data.shape[2:] != (spec.height, spec.width):
            raise ArgumentError(f"field {self.data.shape[2:]} does not match grid {spec.height}x{spec.width}")

    def select_hours(self, hours: Sequence[int]) -> "GriddedField":
        index = {t: i for i, t in enumerate(self.timestamps)}
        missing = [h for h in hours if h not in index]
        if missing:
            raise ArgumentError(f"{self.modality}: hours {missing[:5]} not in field")
        return GriddedField(modality=self.modality, data=self.data[[index[h] for h in hours]],
                            timestamps=list(hours))


class NormStats(BaseModel):
    modality: str
    mean: List[float]
    std: List[float]

    @model_validator(mode="after")
    def _check_std(self) -> "NormStats":
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be positive in every channel")
        return self

    @property
    def channels(self) -> int:
        return len(self.mean)


# ---------------------------------------------------------------------------
# remapping

def _accumulate(rows: np.ndarray, cols: np.ndarray, values: np.ndarray, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel (sum, count) grids in float64 / int64."""
    n_cells = spec.height * spec.width
    flat = rows * spec.width + cols
    channels = values.shape[1]
    sums = np.zeros((channels, n_cells), dtype=np.float64)
    counts = np.zeros((channels, n_cells), dtype=np.int64)
    for k in range(channels):
        valid = ~np.isnan(values[:, k])
        sums[k] = np.bincount(flat[valid], weights=values[valid, k].astype(np.float64), minlength=n_cells)
        counts[k] = np.bincount(flat[valid], minlength=n_cells)
    return sums, counts


def remap_with_counts(swath: SwathBatch, spec: GridSpec, jobs: int = 1) -> Tuple[GriddedField, np.ndarray]:
    """
    Average every observation into its nearest grid cell.

    Returns the single-time field and the per-channel observation counts
    [C, H, W]. With jobs > 1 the points are split into contiguous shards whose
    partial sums are reduced in shard order.
    """
    channels = swath.channels
    if swath.n_points == 0:
        data = np.full((1, channels, spec.height, spec.width), np.nan, dtype=np.float32)
        counts = np.zeros((channels, spec.height, spec.width), dtype=np.int64)
        return GriddedField(modality=swath.modality, data=data, timestamps=[swath.hour]), counts

    rows, cols = cells_of_latlon(swath.lats, swath.lons, spec)
    if jobs > 1 and swath.n_points >= jobs:
        bounds = np.linspace(0, swath.n_points, jobs + 1).astype(np.int64)
        shards = [(rows[a:b], cols[a:b], swath.values[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(lambda s: _accumulate(*s, spec), shards))
        sums = np.zeros_like(partials[0][0])
        counts = np.zeros_like(partials[0][1])
        for part_sums, part_counts in partials:
            sums += part_sums
            counts += part_counts
    else:
        sums, counts = _accumulate(rows, cols, swath.values, spec)

    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    data = mean.reshape(1, channels, spec.height, spec.width).astype(np.float32)
    field = GriddedField(modality=swath.modality, data=data, timestamps=[swath.hour])
    return field, counts.reshape(channels, spec.height, spec.width)


def remap(swath: SwathBatch, spec: GridSpec, jobs: int = 1) -> GriddedField:
    field, _ = remap_with_counts(swath, spec, jobs=jobs)
    return field


def merge_time(fields: Sequence[GriddedField], fill_gaps: bool = False) -> GriddedField:
    """Concatenate single-time fields along T, sorted by hour; optionally insert all-NaN frames for absent hours."""
    if not fields:
        raise ArgumentError("merge_time needs at least one field")
    modality = fields[0].modality
    frame_shape = fields[0].data.shape[1:]
    for field in fields:
        if field.modality != modality:
            raise ArgumentError(f"cannot merge modality {field.modality} into {modality}")
        if field.data.shape[1:] != frame_shape:
            raise ArgumentError(f"frame shape {field.data.shape[1:]} differs from {frame_shape}")
    frames: Dict[int, np.ndarray] = {}
    for field in fields:
        for t, frame in zip(field.timestamps, field.data):
            if t in frames:
                raise ArgumentError(f"duplicate timestamp {t}")
            frames[t] = frame
    hours = sorted(frames)
    if fill_gaps:
        blank = np.full(frame_shape, np.nan, dtype=np.float32)
        hours = list(range(hours[0], hours[-1] + 1))
        stack = [frames.get(t, blank) for t in hours]
    else:
        stack = [frames[t] for t in hours]
    return GriddedField(modality=modality, data=np.stack(stack), timestamps=hours)


# ---------------------------------------------------------------------------
# normalisation

def fit_stats(field: GriddedField) -> NormStats:
    """Per-channel mean and population std over non-NaN cells, in float64."""
    means, stds = [], []
    for k in range(field.channels):
        channel = field.data[:, k].astype(np.float64)
        values = channel[~np.isnan(channel)]
        if values.size < 2:
            raise StatisticsError(f"{field.modality} channel {k}: fewer than 2 observed cells")
        mean = values.mean()
        std = np.sqrt(np.mean((values - mean) ** 2))
        if std == 0:
            raise StatisticsError(f"{field.modality} channel {k}: zero standard deviation")
        means.append(float(mean))
        stds.append(float(std))
    return NormStats(modality=field.modality, mean=means, std=stds)


def _stat_arrays(field: GriddedField, stats: NormStats) -> Tuple[np.ndarray, np.ndarray]:
    if field.modality != stats.modality:
        raise ArgumentError(f"stats for {stats.modality} applied to {field.modality}")
    if field.channels != stats.channels:
        raise ArgumentError(f"stats have {stats.channels} channels, field has {field.channels}")
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(1, -1, 1, 1)
    return mean, std


def normalize(field: GriddedField, stats: NormStats) -> GriddedField:
    mean, std = _stat_arrays(field, stats)
    data = ((field.data.astype(np.float64) - mean) / std).astype(np.float32)
    return GriddedField(modality=field.modality, data=data, timestamps=list(field.timestamps))


def denormalize(field: GriddedField, stats: NormStats) -> GriddedField:
    mean, std = _stat_arrays(field, stats)
    data = (field.data.astype(np.float64) * std + mean).astype(np.float32)
    return GriddedField(modality=field.modality, data=data, timestamps=list(field.timestamps))


# ---------------------------------------------------------------------------
# file formats

def _encode_header(pairs: Sequence[Tuple[str, str]]) -> bytes:
    return "".join(f"{k}:{v}\n" for k, v in pairs).encode("utf-8")


def _pack(magic: bytes, header: bytes, payload: bytes) -> bytes:
    return magic + struct.pack("<I", len(header)) + header + payload


def _unpack(blob: bytes, magic: bytes, path: str) -> Tuple[str, bytes]:
    if len(blob) < _PREAMBLE:
        raise FormatError("file shorter than the preamble", offset=len(blob), path=path)
    if blob[:8] != magic:
        raise FormatError(f"bad magic {blob[:8]!r}, expected {magic!r}", offset=0, path=path)
    (header_len,) = struct.unpack("<I", blob[8:12])
    if _PREAMBLE + header_len > len(blob):
        raise FormatError(f"header length {header_len} runs past end of file", offset=8, path=path)
    try:
        header = blob[_PREAMBLE:_PREAMBLE + header_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"header is not utf-8: {e}", offset=_PREAMBLE, path=path)
    return header, blob[_PREAMBLE + header_len:]


def _parse_pairs(header: str, path: str) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for line in header.splitlines():
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"header line without ':' ({line!r})", offset=8, path=path)
        pairs[key] = value
    return pairs


def _require(pairs: Dict[str, str], keys: Sequence[str], path: str) -> None:
    missing = [k for k in keys if k not in pairs]
    if missing:
        raise FormatError(f"header missing keys {missing}", offset=_PREAMBLE, path=path)


def _int_field(pairs: Dict[str, str], key: str, path: str) -> int:
    try:
        value = int(pairs[key])
    except ValueError:
        raise FormatError(f"header field {key}={pairs[key]!r} is not an integer", offset=_PREAMBLE, path=path)
    if value < 0:
        raise FormatError(f"header field {key}={value} is negative", offset=_PREAMBLE, path=path)
    return value


def _check_payload(payload: bytes, expected: int, offset: int, path: str) -> None:
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {expected}", offset=offset, path=path)


def write_grid(field: GriddedField, path: Union[str, Path]) -> Path:
    T, C, H, W = field.data.shape
    header = _encode_header([
        ("modality", field.modality),
        ("channels", str(C)),
        ("height", str(H)),
        ("width", str(W)),
        ("time", str(T)),
        ("timestamps", ",".join(str(t) for t in field.timestamps)),
        ("dtype", "f32le"),
        ("missing", "nan"),
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_pack(GRID_MAGIC, header, np.ascontiguousarray(field.data, dtype="<f4").tobytes()))
    return path


def read_grid(path: Union[str, Path]) -> GriddedField:
    name = str(path)
    blob = Path(path).read_bytes()
    header, payload = _unpack(blob, GRID_MAGIC, name)
    pairs = _parse_pairs(header, name)
    _require(pairs, ["modality", "channels", "height", "width", "time", "timestamps"], name)
    if pairs.get("dtype", "f32le") != "f32le":
        raise FormatError(f"unsupported dtype {pairs['dtype']}", offset=_PREAMBLE, path=name)
    T, C, H, W = (_int_field(pairs, k, name) for k in ("time", "channels", "height", "width"))
    try:
        stamps = [int(s) for s in pairs["timestamps"].split(",") if s]
    except ValueError:
        raise FormatError(f"bad timestamps {pairs['timestamps']!r}", offset=_PREAMBLE, path=name)
    if len(stamps) != T:
        raise FormatError(f"{len(stamps)} timestamps for time={T}", offset=_PREAMBLE, path=name)
    _check_payload(payload, T * C * H * W * 4, len(blob) - len(payload), name)
    data = np.frombuffer(payload, dtype="<f4").reshape(T, C, H, W).astype(np.float32)
    return GriddedField(modality=pairs["modality"], data=data, timestamps=stamps)


def write_swath(swath: SwathBatch, path: Union[str, Path]) -> Path:
    header = _encode_header([
        ("modality", swath.modality),
        ("channels", str(swath.channels)),
        ("n_points", str(swath.n_points)),
        ("hour", str(swath.hour)),
    ])
    records = np.concatenate([swath.lats[:, None], swath.lons[:, None], swath.values], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_pack(SWATH_MAGIC, header, np.ascontiguousarray(records, dtype="<f4").tobytes()))
    return path


def read_swath(path: Union[str, Path]) -> SwathBatch:
    name = str(path)
    blob = Path(path).read_bytes()
    header, payload = _unpack(blob, SWATH_MAGIC, name)
    pairs = _parse_pairs(header, name)
    _require(pairs, ["modality", "channels", "n_points"], name)
    C, n = _int_field(pairs, "channels", name), _int_field(pairs, "n_points", name)
    _check_payload(payload, n * (2 + C) * 4, len(blob) - len(payload), name)
    records = np.frombuffer(payload, dtype="<f4").reshape(n, 2 + C).astype(np.float32)
    return SwathBatch(modality=pairs["modality"], hour=_int_field(pairs, "hour", name) if "hour" in pairs else 0,
                      lats=records[:, 0], lons=records[:, 1], values=records[:, 2:])


def write_checkpoint(arrays: Dict[str, np.ndarray], path: Union[str, Path],
                     meta: Optional[Dict[str, str]] = None) -> Path:
    """
    Manifest lines are `name rank d1 .. dn`; metadata lines are `@key value`.
    Arrays are concatenated as f32 little-endian in manifest order.
    """
    lines = []
    for key, value in (meta or {}).items():
        if "\n" in value:
            raise ArgumentError(f"metadata {key} spans several lines")
        lines.append(f"@{key} {value}")
    payload = []
    for name, array in arrays.items():
        if not name or " " in name or name.startswith("@"):
            raise ArgumentError(f"invalid array name {name!r}")
        array = np.asarray(array, dtype=np.float32)
        lines.append(" ".join([name, str(array.ndim)] + [str(d) for d in array.shape]))
        payload.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_pack(CKPT_MAGIC, header, b"".join(payload)))
    logger.info(f"Checkpoint saved to: {path}")
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    name = str(path)
    blob = Path(path).read_bytes()
    header, payload = _unpack(blob, CKPT_MAGIC, name)
    payload_start = len(blob) - len(payload)
    meta: Dict[str, str] = {}
    manifest: List[Tuple[str, Tuple[int, ...]]] = []
    for line in header.splitlines():
        if not line:
            continue
        if line.startswith("@"):
            key, _, value = line[1:].partition(" ")
            meta[key] = value
            continue
        parts = line.split()
        try:
            rank = int(parts[1])
            dims = tuple(int(d) for d in parts[2:])
        except (IndexError, ValueError):
            raise FormatError(f"bad manifest line {line!r}", offset=_PREAMBLE, path=name)
        if len(dims) != rank:
            raise FormatError(f"{parts[0]}: rank {rank} with {len(dims)} dims", offset=_PREAMBLE, path=name)
        if any(d < 0 for d in dims):
            raise FormatError(f"{parts[0]}: negative dimension in {dims}", offset=_PREAMBLE, path=name)
        manifest.append((parts[0], dims))
    expected = sum(int(np.prod(dims, dtype=np.int64)) * 4 for _, dims in manifest)
    _check_payload(payload, expected, payload_start, name)
    arrays: Dict[str, np.ndarray] = {}
    cursor = 0
    for array_name, dims in manifest:
        size = int(np.prod(dims, dtype=np.int64))
        arrays[array_name] = np.frombuffer(payload, dtype="<f4", count=size, offset=cursor).reshape(dims).astype(np.float32)
        cursor += size * 4
    return arrays, meta
