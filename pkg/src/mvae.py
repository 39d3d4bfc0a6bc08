"""
Mask ViT-VAE: per-modality tokenizer that encodes a tile of gappy
observations into latent tokens and decodes a dense tile back. Patches with
too few observed cells are hidden from every attention layer.
"""
from typing import NamedTuple, Optional, Tuple, Union
from pathlib import Path
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange, repeat
from pydantic import BaseModel, Field

from src.data_processing import split_tiles
from src.exceptions import ArgumentError, ContractError
from src.nncore import (
    LN_EPS,
    OptimConfig,
    PatchEmbed,
    TransformerBlock,
    export_params,
    import_params,
    init_weights,
    masked_mae_loss,
)
from src.obsio import GriddedField, NormStats, fit_stats, normalize, read_checkpoint, write_checkpoint
from src.training import train_model
from src.utils import seed_everything

logger = logging.getLogger(__name__)

LATENT_FACTOR = 4
LOGVAR_RANGE = (-30.0, 20.0)


class VaeConfig(BaseModel):
    patch: int = 8
    dim: int = 64
    enc_depth: int = 4
    dec_depth: int = 4
    quant_depth: int = 1
    heads: int = 4
    obs_threshold: float = 0.10
    kl_weight: float = 1e-6
    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(total_steps=5000, batch_size=32, log_every=100))


class LatentTile(NamedTuple):
    z: torch.Tensor          # [B, N, 4c]
    mu: torch.Tensor         # [B, N, 4c]
    sigma: torch.Tensor      # [B, N, 4c]
    observed: torch.Tensor   # [B, N] bool


def latent_channels(channels: int) -> int:
    return LATENT_FACTOR * channels


def compression_ratio(tile: int, patch: int, channels: int) -> float:
    """Pixel values per tile over latent values per tile; equals patch^2 / 4."""
    tokens = (tile // patch) ** 2
    return (tile * tile * channels) / (tokens * latent_channels(channels))


def patch_mask(x: torch.Tensor, patch: int, threshold: float) -> torch.Tensor:
    """[B, C, t, t] with NaN -> [B, N] bool; a patch is observed when its non-NaN fraction reaches `threshold`."""
    counts = rearrange(~torch.isnan(x), "b c (h p) (w q) -> b (h w) (c p q)", p=patch, q=patch).sum(-1)
    total = x.shape[1] * patch * patch
    needed = max(1, math.ceil(threshold * total - 1e-9))
    return counts >= needed


def kl_divergence(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the last dim."""
    if bool((sigma <= 0).any()):
        raise ContractError("posterior sigma must be positive")
    return 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * torch.log(sigma)).sum(-1)


def token_cells(token_mask: torch.Tensor, patch: int, grid: int) -> torch.Tensor:
    """[B, N] token flags -> [B, 1, grid*patch, grid*patch] cell flags."""
    return repeat(token_mask, "b (h w) -> b 1 (h p) (w q)", h=grid, w=grid, p=patch, q=patch)


def vae_loss(x: torch.Tensor, recon: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
             kl_weight: float, token_mask: Optional[torch.Tensor] = None,
             patch: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Masked reconstruction MAE plus kl_weight * KL.

    With `token_mask`, reconstruction counts only non-NaN cells of observed
    patches and KL is averaged over observed tokens; otherwise every non-NaN
    cell and every token counts. Returns (total, recon_mae, kl).
    """
    if x.shape != recon.shape:
        raise ArgumentError(f"x {tuple(x.shape)} vs recon {tuple(recon.shape)}")
    kl_tokens = kl_divergence(mu, sigma)
    if token_mask is None:
        recon_mae = masked_mae_loss(recon, x)
        kl = kl_tokens.mean()
    else:
        if patch is None:
            raise ArgumentError("token_mask needs the patch size")
        grid = x.shape[-1] // patch
        cells = token_cells(token_mask, patch, grid).expand_as(x)
        recon_mae = masked_mae_loss(recon, x, mask=cells)
        weights = token_mask.to(kl_tokens.dtype)
        kl = (kl_tokens * weights).sum() / weights.sum().clamp_min(1.0)
    return recon_mae + kl_weight * kl, recon_mae, kl


class MaskViTVAE(nn.Module):
    def __init__(self, cfg: VaeConfig, channels: int, tile: int):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        self.tile = tile
        self.patch = cfg.patch
        self.embed = PatchEmbed(channels, tile, cfg.patch, cfg.dim)
        self.grid = self.embed.grid
        self.num_tokens = self.embed.num_tokens
        self.latent_dim = latent_channels(channels)

        self.enc_blocks = nn.ModuleList([TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.enc_depth)])
        self.enc_norm = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        # two parallel branches over the encoder output, concatenated to 2D
        self.quant_a = nn.ModuleList([TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.quant_depth)])
        self.quant_b = nn.ModuleList([TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.quant_depth)])
        self.quant_norm = nn.LayerNorm(2 * cfg.dim, eps=LN_EPS)
        self.to_moments = nn.Linear(2 * cfg.dim, 2 * self.latent_dim)

        self.from_latent = nn.Linear(self.latent_dim, cfg.dim)
        self.mask_embed = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.dec_pos = nn.Parameter(torch.zeros(1, self.num_tokens, cfg.dim))
        self.dec_blocks = nn.ModuleList([TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.dec_depth)])
        self.dec_norm = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        self.out_proj = nn.Conv2d(cfg.dim, cfg.patch * cfg.patch * channels, kernel_size=1)
        self.out_refine = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

        self.apply(init_weights)
        nn.init.trunc_normal_(self.mask_embed, std=0.02)
        nn.init.trunc_normal_(self.dec_pos, std=0.02)

    def encode(self, x: torch.Tensor, mode: str = "mean", generator: Optional[torch.Generator] = None) -> LatentTile:
        """x: [B, C, tile, tile] normalised, NaN where missing."""
        if mode not in ("mean", "sample"):
            raise ArgumentError(f"unknown encode mode {mode!r}")
        observed = patch_mask(x, self.patch, self.cfg.obs_threshold)
        inert = ~observed.any(dim=-1)
        h = self.embed(torch.nan_to_num(x, nan=0.0))
        for blk in self.enc_blocks:
            h = blk(h, key_mask=observed, inert=inert)
        h = self.enc_norm(h)
        a, b = h, h
        for blk in self.quant_a:
            a = blk(a, key_mask=observed, inert=inert)
        for blk in self.quant_b:
            b = blk(b, key_mask=observed, inert=inert)
        moments = self.to_moments(self.quant_norm(torch.cat([a, b], dim=-1)))
        mu, logvar = moments.chunk(2, dim=-1)
        sigma = torch.exp(0.5 * logvar.clamp(*LOGVAR_RANGE))
        if mode == "mean":
            z = mu
        else:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            z = mu + sigma * eps
        return LatentTile(z=z, mu=mu, sigma=sigma, observed=observed)

    def decode(self, z: torch.Tensor, observed: Optional[torch.Tensor] = None) -> torch.Tensor:
        """z: [B, N, 4c]; tokens flagged unobserved enter as the learned mask embedding."""
        if tuple(z.shape[1:]) != (self.num_tokens, self.latent_dim):
            raise ArgumentError(f"decode expects [B, {self.num_tokens}, {self.latent_dim}], got {tuple(z.shape)}")
        h = self.from_latent(z)
        if observed is not None:
            h = torch.where(observed[..., None], h, self.mask_embed.to(h.dtype).expand_as(h))
        h = h + self.dec_pos
        for blk in self.dec_blocks:
            h = blk(h)
        h = rearrange(self.dec_norm(h), "b (h w) d -> b d h w", h=self.grid, w=self.grid)
        return self.out_refine(F.pixel_shuffle(self.out_proj(h), self.patch))

    def forward(self, x: torch.Tensor, mode: str = "sample",
                generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, LatentTile]:
        latent = self.encode(x, mode=mode, generator=generator)
        return self.decode(latent.z, latent.observed), latent


class VaeBundle:
    """A trained VAE with the normalisation statistics of its modality."""

    def __init__(self, model: MaskViTVAE, stats: NormStats, cfg: VaeConfig):
        if stats.channels != model.channels:
            raise ContractError(f"stats have {stats.channels} channels, model {model.channels}")
        self.model = model.eval()
        self.stats = stats
        self.cfg = cfg

    @property
    def modality(self) -> str:
        return self.stats.modality

    def save(self, path: Union[str, Path]) -> Path:
        meta = {
            "kind": "vae",
            "channels": str(self.model.channels),
            "tile": str(self.model.tile),
            "config": self.cfg.model_dump_json(),
            "stats": self.stats.model_dump_json(),
        }
        return write_checkpoint(export_params(self.model), path, meta=meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VaeBundle":
        arrays, meta = read_checkpoint(path)
        if meta.get("kind") != "vae":
            raise ContractError(f"{path} is a {meta.get('kind')!r} checkpoint, expected 'vae'")
        cfg = VaeConfig.model_validate_json(meta["config"])
        model = MaskViTVAE(cfg, channels=int(meta["channels"]), tile=int(meta["tile"]))
        import_params(model, arrays)
        return cls(model, NormStats.model_validate_json(meta["stats"]), cfg)

    @torch.no_grad()
    def encode_tiles(self, tiles: np.ndarray, batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
        """[n, C, t, t] normalised -> mean latents [n, N, 4c] and observed flags [n, N]."""
        zs, flags = [], []
        for start in range(0, tiles.shape[0], batch_size):
            latent = self.model.encode(torch.from_numpy(np.ascontiguousarray(tiles[start:start + batch_size])), mode="mean")
            zs.append(latent.z.numpy())
            flags.append(latent.observed.numpy())
        return np.concatenate(zs), np.concatenate(flags)

    @torch.no_grad()
    def decode_tiles(self, z: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """[n, N, 4c] -> normalised dense tiles [n, C, t, t]."""
        out = [self.model.decode(torch.from_numpy(np.ascontiguousarray(z[start:start + batch_size], dtype=np.float32))).numpy()
               for start in range(0, z.shape[0], batch_size)]
        return np.concatenate(out)


def observed_tiles(field: GriddedField, tile: int, patch: int, threshold: float) -> np.ndarray:
    """Every (tile, hour) sample of a normalised field that has at least one observed patch, as [n, C, t, t]."""
    tiles = rearrange(split_tiles(field.data, tile), "i j t c h w -> (i j t) c h w")
    keep = patch_mask(torch.from_numpy(tiles), patch, threshold).any(dim=-1).numpy()
    return np.ascontiguousarray(tiles[keep])


def train_vae(field: GriddedField, tile: int, cfg: VaeConfig, seed: int,
              log_path: Optional[Union[str, Path]] = None) -> VaeBundle:
    """Fit normalisation on the raw training field, then train the VAE on its observed tiles."""
    stats = fit_stats(field)
    tiles = observed_tiles(normalize(field, stats), tile, cfg.patch, cfg.obs_threshold)
    if tiles.shape[0] == 0:
        raise ContractError(f"{field.modality}: no tile has an observed patch")
    logger.info(f"VAE {field.modality}: {tiles.shape[0]} training tiles")
    seed_everything(seed)
    model = MaskViTVAE(cfg, channels=field.channels, tile=tile)

    def sample_batch(rng: np.random.Generator) -> torch.Tensor:
        idx = rng.choice(tiles.shape[0], size=cfg.optim.batch_size, replace=tiles.shape[0] < cfg.optim.batch_size)
        return torch.from_numpy(tiles[np.sort(idx)])

    def compute_loss(model: MaskViTVAE, x: torch.Tensor):
        recon, latent = model(x, mode="sample")
        total, recon_mae, kl = vae_loss(x, recon, latent.mu, latent.sigma, cfg.kl_weight,
                                        token_mask=latent.observed, patch=cfg.patch)
        return total, {"recon_mae": float(recon_mae.detach()), "kl": float(kl.detach())}

    train_model(model, sample_batch, compute_loss, cfg.optim, seed=seed, log_path=log_path,
                stage=f"vae[{field.modality}]", log_columns=["step", "lr", "recon_mae", "kl"])
    return VaeBundle(model, stats, cfg)


@torch.no_grad()
def reconstruction_mae(bundle: VaeBundle, field: GriddedField) -> float:
    """Mean-mode masked reconstruction MAE, in normalised units, over observed patches of a raw field."""
    tiles = observed_tiles(normalize(field, bundle.stats), bundle.model.tile, bundle.cfg.patch, bundle.cfg.obs_threshold)
    if tiles.shape[0] == 0:
        raise ContractError(f"{field.modality}: no tile has an observed patch")
    x = torch.from_numpy(tiles)
    latent = bundle.model.encode(x, mode="mean")
    recon = bundle.model.decode(latent.z, latent.observed)
    _, recon_mae, _ = vae_loss(x, recon, latent.mu, latent.sigma, 0.0, token_mask=latent.observed, patch=bundle.cfg.patch)
    return float(recon_mae)
