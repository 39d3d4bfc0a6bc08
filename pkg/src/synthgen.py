"""
Synthetic satellite datasets: a smoothly evolving global field seen through
moving polar-orbit swath bands, one set of files per modality.
"""
from typing import Dict, List, Optional, Sequence, Tuple, Union
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
import logging

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.exceptions import ArgumentError
from src.grid import GridSpec
from src.obsio import GriddedField, SwathBatch, remap, write_grid, write_swath

logger = logging.getLogger(__name__)


class OrbitConfig(BaseModel):
    swath_width: int = 10
    period: int = 12
    inclination_offset: float = 0.0
    phase: float = 0.0
    satellites: int = 1

    @model_validator(mode="after")
    def _check(self) -> "OrbitConfig":
        if self.swath_width <= 0:
            raise ValueError("swath_width must be positive")
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.satellites < 1:
            raise ValueError("satellites must be at least 1")
        return self


class FieldConfig(BaseModel):
    """Latent dynamics shared by every modality: advected, diffusing Gaussian blobs on a static background."""

    n_blobs: int = 24
    advection: Tuple[float, float] = (1.0, 0.0)
    diffusion: float = 0.05
    background: float = 0.5
    channel_couplings: List[Tuple[float, float]] = Field(default_factory=lambda: [(1.0, 0.0)])
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "FieldConfig":
        if self.n_blobs < 0:
            raise ValueError("n_blobs must be nonnegative")
        if self.diffusion < 0:
            raise ValueError("diffusion must be nonnegative")
        if not self.channel_couplings:
            raise ValueError("at least one channel coupling is required")
        return self


class ModalityConfig(BaseModel):
    channels: int
    couplings: List[Tuple[float, float]]
    orbit: OrbitConfig = Field(default_factory=OrbitConfig)
    noise_std: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "ModalityConfig":
        if self.channels < 1:
            raise ValueError("a modality needs at least one channel")
        if len(self.couplings) != self.channels:
            raise ValueError(f"{len(self.couplings)} couplings for {self.channels} channels")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        return self


class BlobSet(BaseModel):
    rows: List[float]
    cols: List[float]
    sigmas: List[float]
    amplitudes: List[float]


def draw_blobs(cfg: FieldConfig, spec: GridSpec) -> BlobSet:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_blobs
    rows = rng.uniform(0.1, 0.9, n) * spec.height
    cols = rng.uniform(0.0, 1.0, n) * spec.width
    sigmas = rng.uniform(0.03, 0.08, n) * spec.height
    signs = rng.choice([-1.0, 1.0], n)
    amplitudes = signs * rng.uniform(0.5, 1.5, n)
    return BlobSet(rows=rows.tolist(), cols=cols.tolist(), sigmas=sigmas.tolist(), amplitudes=amplitudes.tolist())


def latent_field(cfg: FieldConfig, spec: GridSpec, hours: Sequence[int]) -> np.ndarray:
    """
    The scalar field z [T, H, W] in float64. Blob centres move by
    `advection` (cols, rows) per hour, wrapping in longitude; each blob's
    variance grows by 2 * diffusion per hour with its mass conserved.
    """
    blobs = draw_blobs(cfg, spec)
    row_idx = np.arange(spec.height, dtype=np.float64)[:, None]
    col_idx = np.arange(spec.width, dtype=np.float64)[None, :]
    lats, _ = spec.cell_centers()
    base = cfg.background * np.cos(np.deg2rad(lats))[:, None] * np.ones((1, spec.width))
    du, dv = cfg.advection
    frames = []
    for t in hours:
        z = base.copy()
        for r0, c0, s0, amp in zip(blobs.rows, blobs.cols, blobs.sigmas, blobs.amplitudes):
            var = s0 * s0 + 2.0 * cfg.diffusion * t
            r = r0 + dv * t
            c = np.mod(c0 + du * t, spec.width)
            dc = np.mod(col_idx - c + spec.width / 2, spec.width) - spec.width / 2
            dr = row_idx - r
            z += amp * (s0 * s0 / var) * np.exp(-(dr * dr + dc * dc) / (2.0 * var))
        frames.append(z)
    return np.stack(frames)


def couple_channels(z: np.ndarray, couplings: Sequence[Tuple[float, float]]) -> np.ndarray:
    """[T, H, W] -> [T, C, H, W], channel k = scale_k * z + offset_k."""
    return np.stack([scale * z + offset for scale, offset in couplings], axis=1)


def gen_truth(field_cfg: FieldConfig, spec: GridSpec, T: int, modality: str = "truth",
              start_hour: int = 0) -> GriddedField:
    if T < 1:
        raise ArgumentError("gen_truth needs T >= 1")
    hours = list(range(start_hour, start_hour + T))
    z = latent_field(field_cfg, spec, hours)
    data = couple_channels(z, field_cfg.channel_couplings).astype(np.float32)
    return GriddedField(modality=modality, data=data, timestamps=hours)


def swath_mask(orbit: OrbitConfig, spec: GridSpec, t: int) -> np.ndarray:
    """
    Boolean [H, W] footprint of every band observed at hour t. Each satellite
    flies an ascending and a descending band half a globe apart; bands precess
    eastward by W / (2 * period) columns per hour and tilt by
    inclination_offset columns from pole to pole.
    """
    W = spec.width
    if orbit.swath_width >= W:
        raise ArgumentError(f"swath_width {orbit.swath_width} must be below grid width {W}")
    rows = np.arange(spec.height, dtype=np.float64)[:, None]
    cols = np.arange(spec.width, dtype=np.float64)[None, :] + 0.5
    tilt = orbit.inclination_offset * rows / spec.height
    precession = (t % orbit.period) * W / (2.0 * orbit.period)
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for s in range(orbit.satellites):
        start = orbit.phase + s * W / (2.0 * orbit.satellites) + precession
        for band_start in (start, start + W / 2.0):
            mask |= np.mod(cols - band_start - tilt, W) < orbit.swath_width
    return mask


def sample_swath(truth: GriddedField, orbit: OrbitConfig, t: int, noise_std: float,
                 seed: int, spec: Optional[GridSpec] = None) -> SwathBatch:
    """One point per in-band cell, placed at a random sub-cell position, carrying the truth values plus noise."""
    if t not in truth.timestamps:
        raise ArgumentError(f"hour {t} outside truth time axis")
    _, _, H, W = truth.shape
    spec = spec or GridSpec(height=H, width=W, tile=_any_tile(H, W))
    rng = np.random.default_rng(seed)
    rows, cols = np.nonzero(swath_mask(orbit, spec, t))
    n = rows.size
    u_lat = rng.uniform(0.05, 0.95, n)
    u_lon = rng.uniform(0.05, 0.95, n)
    lats = 90.0 - (rows + u_lat) * spec.lat_step
    lons = -180.0 + (cols + u_lon) * spec.lon_step
    frame = truth.data[truth.timestamps.index(t)]
    values = frame[:, rows, cols].T.astype(np.float64)
    if noise_std > 0:
        values = values + rng.normal(0.0, noise_std, values.shape)
    return SwathBatch(modality=truth.modality, hour=t, lats=lats, lons=lons, values=values)


def _any_tile(height: int, width: int) -> int:
    # only lat/lon steps are needed here; tile 1 is not valid when width is odd
    for tile in range(1, height + 1):
        if height % tile == 0 and width % tile == 0 and (width // tile) % 2 == 0:
            return tile
    raise ArgumentError(f"no valid tiling for {height}x{width}")


def hour_seed(seed: int, hour: int) -> int:
    return seed ^ hour


def gen_dataset(modalities: Dict[str, ModalityConfig], field_cfg: FieldConfig, spec: GridSpec,
                hours: int, out_dir: Union[str, Path], seed: int, jobs: int = 1,
                write_swaths: bool = False, precip: Optional["PrecipTruthConfig"] = None) -> Dict[str, List[Path]]:
    """
    Write per-modality hourly gridded observations and the dense per-modality truth.

    Args:
    modalities: Sensor configs keyed by modality name
    field_cfg: Shared latent dynamics; its seed drives the truth
    spec: Target grid
    hours: Number of hours, starting at hour 0
    out_dir: Dataset directory
    seed: Seed for swath jitter and noise
    jobs: Worker threads for per-hour generation
    write_swaths: Also keep the raw swath files
    precip: When given, also write the dense SP/TCWV truth as truth_precip.grd

    Returns:
    Written paths keyed by modality name
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    z = latent_field(field_cfg, spec, list(range(hours)))
    written: Dict[str, List[Path]] = {}
    for index, (name, mod) in enumerate(modalities.items()):
        data = couple_channels(z, mod.couplings).astype(np.float32)
        truth = GriddedField(modality=name, data=data, timestamps=list(range(hours)))
        truth_path = write_grid(truth, out_dir / f"truth_{name}.grd")

        def one_hour(t: int, index=index, name=name, mod=mod, truth=truth) -> Path:
            swath = sample_swath(truth, mod.orbit, t, mod.noise_std,
                                 seed=hash_seed(hour_seed(seed, t), index), spec=spec)
            if write_swaths:
                write_swath(swath, out_dir / name / f"swath_{t:05d}.swt")
            return write_grid(remap(swath, spec), out_dir / name / f"hour_{t:05d}.grd")

        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            paths = list(pool.map(one_hour, range(hours)))
        written[name] = [truth_path] + paths
        logger.info(f"Modality {name}: {hours} hourly fields saved to: {out_dir / name}")
    if precip is not None:
        field = GriddedField(modality="precip", data=precip_from_latent(z, precip), timestamps=list(range(hours)))
        written["precip"] = [write_grid(field, out_dir / "truth_precip.grd")]
        logger.info(f"Precipitation truth saved to: {written['precip'][0]}")
    return written


class PrecipTruthConfig(BaseModel):
    """SP = sp_scale * relu(z - threshold)^2 in mm/h, TCWV = max(0, tcwv_offset + tcwv_scale * z) in mm."""

    threshold: float = 0.5
    sp_scale: float = 4.0
    tcwv_offset: float = 25.0
    tcwv_scale: float = 10.0


def precip_from_latent(z: np.ndarray, cfg: PrecipTruthConfig) -> np.ndarray:
    """[T, H, W] latent -> [T, 2, H, W] float32 (SP, TCWV)."""
    sp = cfg.sp_scale * np.maximum(z - cfg.threshold, 0.0) ** 2
    tcwv = np.maximum(cfg.tcwv_offset + cfg.tcwv_scale * z, 0.0)
    return np.stack([sp, tcwv], axis=1).astype(np.float32)


def hash_seed(seed: int, index: int) -> int:
    """Distinct, reproducible per-modality seed from a per-hour seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])
