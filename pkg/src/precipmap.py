"""Precipitation retrieval head: one modality's latent tokens -> SP and TCWV fields, trained on log-transformed targets."""
from typing import List, Optional, Sequence, Union
from pathlib import Path
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from pydantic import BaseModel, Field, model_validator

from src.data_processing import merge_tiles, split_tiles
from src.exceptions import ArgumentError, ContractError
from src.grid import GridSpec
from src.nncore import (
    LN_EPS,
    OptimConfig,
    TransformerBlock,
    export_params,
    import_params,
    init_weights,
    masked_mae_loss,
)
from src.obsio import GriddedField, NormStats, denormalize, fit_stats, normalize, read_checkpoint, write_checkpoint
from src.synthgen import PrecipTruthConfig
from src.training import train_model
from src.utils import seed_everything

logger = logging.getLogger(__name__)

PRECIP_CHANNELS = ("sp", "tcwv")


class LogTransform(BaseModel):
    """y = ln(x / a + b); inverse x = a * (exp(y) - b), clamped at 0."""

    a: float
    b: float

    @model_validator(mode="after")
    def _check(self) -> "LogTransform":
        if self.a <= 0 or self.b <= 0:
            raise ValueError("log transform needs a > 0 and b > 0")
        return self


SP_TRANSFORM = LogTransform(a=1e-7, b=100.0)
TCWV_TRANSFORM = LogTransform(a=1.0, b=1.0)
TRANSFORMS = (SP_TRANSFORM, TCWV_TRANSFORM)


def log_fwd(x: np.ndarray, t: LogTransform) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x[~np.isnan(x)] < 0):
        raise ArgumentError("log transform of negative precipitation")
    return np.log(x / t.a + t.b)


def log_inv(y: np.ndarray, t: LogTransform) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    x = t.a * (np.exp(y) - t.b)
    return np.where(np.isnan(x), np.nan, np.maximum(x, 0.0))


class PrecipConfig(BaseModel):
    modality: str = "mhs"
    dim: int = 64
    depth: int = 2
    heads: int = 4
    truth: PrecipTruthConfig = Field(default_factory=PrecipTruthConfig)
    sp_thresholds: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    tcwv_thresholds: List[float] = Field(default_factory=lambda: [10.0, 20.0, 30.0])
    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(total_steps=2000, batch_size=32, log_every=100))


class PrecipHead(nn.Module):
    """Tokens [B, N, L] of one hour -> [B, 2, tile, tile] log-space normalised SP/TCWV."""

    def __init__(self, cfg: PrecipConfig, latent_dim: int, tokens_side: int, patch: int):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = latent_dim
        self.tokens_side = tokens_side
        self.patch = patch
        self.num_tokens = tokens_side * tokens_side
        out_channels = len(PRECIP_CHANNELS)
        self.in_proj = nn.Linear(latent_dim, cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_tokens, cfg.dim))
        self.blocks = nn.ModuleList([TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        self.out_proj = nn.Conv2d(cfg.dim, patch * patch * out_channels, kernel_size=1)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != (self.num_tokens, self.latent_dim):
            raise ArgumentError(f"precip head expects [B, {self.num_tokens}, {self.latent_dim}], got {tuple(z.shape)}")
        h = self.in_proj(z) + self.pos_embed
        for blk in self.blocks:
            h = blk(h)
        h = rearrange(self.norm(h), "b (h w) d -> b d h w", h=self.tokens_side)
        return F.pixel_shuffle(self.out_proj(h), self.patch)


class PrecipBundle:
    def __init__(self, model: PrecipHead, stats: NormStats, cfg: PrecipConfig):
        self.model = model.eval()
        self.stats = stats
        self.cfg = cfg

    def save(self, path: Union[str, Path]) -> Path:
        meta = {
            "kind": "precip",
            "latent_dim": str(self.model.latent_dim),
            "tokens_side": str(self.model.tokens_side),
            "patch": str(self.model.patch),
            "config": self.cfg.model_dump_json(),
            "stats": self.stats.model_dump_json(),
        }
        return write_checkpoint(export_params(self.model), path, meta=meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PrecipBundle":
        arrays, meta = read_checkpoint(path)
        if meta.get("kind") != "precip":
            raise ContractError(f"{path} is a {meta.get('kind')!r} checkpoint, expected 'precip'")
        cfg = PrecipConfig.model_validate_json(meta["config"])
        model = PrecipHead(cfg, int(meta["latent_dim"]), int(meta["tokens_side"]), int(meta["patch"]))
        import_params(model, arrays)
        return cls(model, NormStats.model_validate_json(meta["stats"]), cfg)


def log_field(field: GriddedField) -> GriddedField:
    """Physical SP/TCWV -> log space, channel by channel."""
    data = np.stack([log_fwd(field.data[:, k], t) for k, t in enumerate(TRANSFORMS)], axis=1).astype(np.float32)
    return GriddedField(modality=field.modality, data=data, timestamps=list(field.timestamps))


def tokens_by_hour(tokens: np.ndarray) -> np.ndarray:
    """Cache-layout [i, j, T, L, th, tw] -> [(i j T), N, L]."""
    return rearrange(tokens, "i j t l h w -> (i j t) (h w) l")


def train_precip_head(tokens: np.ndarray, targets: GriddedField, observed: np.ndarray, spec: GridSpec,
                      patch: int, cfg: PrecipConfig, seed: int,
                      log_path: Optional[Union[str, Path]] = None) -> PrecipBundle:
    """
    Fit the head on co-located (tokens, precipitation) pairs.

    Args:
    tokens: Scaled latents of the precipitating modality, [tiles_h, tiles_w, T, L, th, tw]
    targets: Physical SP/TCWV over the same T hours, [T, 2, H, W]
    observed: Bool [T, H, W]; target cells outside it are dropped from the loss
    spec: Grid
    patch: VAE patch size (cells per token side)
    cfg: Head settings
    seed: Training seed
    log_path: Training log CSV

    Returns:
    The trained head with its log-space normalisation
    """
    logged = log_field(targets)
    logged.data[np.broadcast_to(~observed[:, None], logged.data.shape)] = np.nan
    stats = fit_stats(logged)
    normed = normalize(logged, stats)
    target_tiles = rearrange(split_tiles(normed.data, spec.tile), "i j t c h w -> (i j t) c h w")
    z = tokens_by_hour(tokens)
    has_target = (~np.isnan(target_tiles)).any(axis=(1, 2, 3))
    z, target_tiles = z[has_target], np.ascontiguousarray(target_tiles[has_target])
    if z.shape[0] == 0:
        raise ContractError("no observed precipitation target")
    logger.info(f"Precip head: {z.shape[0]} training samples")

    seed_everything(seed)
    model = PrecipHead(cfg, latent_dim=tokens.shape[3], tokens_side=tokens.shape[4], patch=patch)

    def sample_batch(rng: np.random.Generator):
        idx = np.sort(rng.choice(z.shape[0], size=cfg.optim.batch_size, replace=z.shape[0] < cfg.optim.batch_size))
        return torch.from_numpy(z[idx]), torch.from_numpy(target_tiles[idx])

    def compute_loss(model: PrecipHead, batch):
        x, y = batch
        return masked_mae_loss(model(x), y), {}

    train_model(model, sample_batch, compute_loss, cfg.optim, seed=seed, log_path=log_path, stage="precip",
                log_columns=["step", "lr", "loss"])
    return PrecipBundle(model, stats, cfg)


@torch.no_grad()
def head_output(bundle: PrecipBundle, tokens: np.ndarray, timestamps: Sequence[int]) -> GriddedField:
    """Normalised log-space head output as a field [T, 2, H, W]."""
    th, tw = tokens.shape[:2]
    z = torch.from_numpy(np.ascontiguousarray(tokens_by_hour(tokens), dtype=np.float32))
    out = torch.cat([bundle.model(z[k:k + 256]) for k in range(0, z.shape[0], 256)]).numpy()
    tiles = rearrange(out, "(i j t) c h w -> i j t c h w", i=th, j=tw)
    return GriddedField(modality="precip", data=merge_tiles(tiles), timestamps=list(timestamps))


def map_precip(tokens: np.ndarray, bundle: PrecipBundle, timestamps: Sequence[int]) -> GriddedField:
    """Forecast tokens -> physical SP (mm/h) and TCWV (mm), nonnegative."""
    logged = denormalize(head_output(bundle, tokens, timestamps), bundle.stats)
    data = np.stack([log_inv(logged.data[:, k], t) for k, t in enumerate(TRANSFORMS)], axis=1).astype(np.float32)
    return GriddedField(modality="precip", data=data, timestamps=list(timestamps))


def log_space_mae(bundle: PrecipBundle, tokens: np.ndarray, targets: GriddedField, observed: np.ndarray) -> float:
    """Held-out masked MAE in normalised log space."""
    logged = log_field(targets)
    logged.data[np.broadcast_to(~observed[:, None], logged.data.shape)] = np.nan
    normed = normalize(logged, bundle.stats)
    pred = head_output(bundle, tokens, targets.timestamps)
    return float(masked_mae_loss(torch.from_numpy(pred.data), torch.from_numpy(normed.data)))
