"""
Tiled forecaster: a temporal-spatial decoupled transformer that reads a 3x3
neighbourhood of latent token windows and predicts the centre tile's next
window, plus the global rollout driver built on the state cache.
"""
from typing import Dict, List, Optional, Sequence, Tuple, Union
from pathlib import Path
import logging

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.aida import AidaBundle, EncodedField, ImputedWindow, complete_windows, decode_tokens, impute_window, to_cache_layout, window_batch
from src.data_processing import window_starts
from src.exceptions import ArgumentError, ContractError
from src.grid import GridSpec, TileCoord, neighbours8
from src.mvae import VaeBundle
from src.nncore import (
    LN_EPS,
    MaskedSelfAttention,
    OptimConfig,
    SwiGLUFFN,
    export_params,
    import_params,
    init_weights,
    masked_mse_loss,
)
from src.obsio import GriddedField, read_checkpoint, write_checkpoint
from src.statecache import GlobalStateCache, init_cache
from src.training import train_model
from src.utils import seed_everything

logger = logging.getLogger(__name__)

# mosaic (row, col) block of each neighbour, in neighbours8 order
MOSAIC_SLOTS = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)]

TokenBuffers = Dict[str, np.ndarray]


class AiwpConfig(BaseModel):
    dim: int = 64
    depth: int = 4
    heads: int = 4
    cbc: bool = True
    init_mode: str = "aida"
    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(total_steps=3000, batch_size=8, log_every=100))

    @field_validator("init_mode")
    @classmethod
    def _check_init_mode(cls, v: str) -> str:
        if v not in ("aida", "raw"):
            raise ValueError(f"init_mode must be 'aida' or 'raw', got {v!r}")
        return v


# ---------------------------------------------------------------------------
# CBC mosaics

def place_mosaic(center: np.ndarray, neighbours: Sequence[np.ndarray]) -> np.ndarray:
    """[T, L, th, tw] centre and 8 neighbours -> [3*th, 3*tw, T, L]."""
    T, L, th, tw = center.shape
    mosaic = np.empty((3 * th, 3 * tw, T, L), dtype=np.float32)
    blocks = [((1, 1), center)] + list(zip(MOSAIC_SLOTS, neighbours))
    for (br, bc), tile in blocks:
        mosaic[br * th:(br + 1) * th, bc * tw:(bc + 1) * tw] = rearrange(tile, "t l h w -> h w t l")
    return mosaic


def mosaic_from_buffers(buffers: TokenBuffers, modalities: Sequence[str], coord: TileCoord, cbc: bool = True) -> np.ndarray:
    """CBC input straight from whole-globe token buffers [tiles_h, tiles_w, T, L, th, tw]."""
    parts = []
    for m in modalities:
        buf = buffers[m]
        center = buf[coord[0], coord[1]]
        if cbc:
            order = neighbours8(coord, buf.shape[0], buf.shape[1])
            neighbours = [buf[r, c] for r, c in order]
        else:
            neighbours = [center] * 8
        parts.append(place_mosaic(center, neighbours))
    return np.concatenate(parts, axis=-1)


def assemble_cbc(cache: GlobalStateCache, center_tokens: Dict[str, np.ndarray], coord: Tuple[int, int],
                 cbc: bool = True) -> np.ndarray:
    """
    Centre tile surrounded by its 8 neighbours from the cache's previous
    buffer, modalities concatenated along channels: [3*th, 3*tw, T, sum L].
    Without CBC the centre is replicated into every slot.
    """
    neighbours = cache.query_neighbours(coord) if cbc else None
    parts = []
    for m in cache.modalities:
        center = center_tokens[m]
        if center.shape != cache.slot_shape(m):
            raise ArgumentError(f"{m}: centre tokens {center.shape} vs slot {cache.slot_shape(m)}")
        parts.append(place_mosaic(center, neighbours[m] if cbc else [center] * 8))
    return np.concatenate(parts, axis=-1)


def split_channels(x: np.ndarray, latent_dims: Dict[str, int]) -> Dict[str, np.ndarray]:
    """[th, tw, T, sum L] -> per modality [T, L, th, tw]."""
    out, offset = {}, 0
    for m, d in latent_dims.items():
        out[m] = np.ascontiguousarray(rearrange(x[..., offset:offset + d], "h w t l -> t l h w"))
        offset += d
    return out


def join_channels(tiles: Dict[str, np.ndarray], modalities: Sequence[str]) -> np.ndarray:
    """Per modality [T, L, th, tw] -> [th, tw, T, sum L]."""
    return np.concatenate([rearrange(tiles[m], "t l h w -> h w t l") for m in modalities], axis=-1)


# ---------------------------------------------------------------------------
# model

class TSBlock(nn.Module):
    """Attention along T per spatial site, then along space per time step; each sublayer pre-normed with a SwiGLU FFN."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.t_norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.t_attn = MaskedSelfAttention(dim, heads)
        self.t_norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.t_ffn = SwiGLUFFN(dim)
        self.s_norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.s_attn = MaskedSelfAttention(dim, heads)
        self.s_norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.s_ffn = SwiGLUFFN(dim)

    def forward(self, x: torch.Tensor, spatial_mixing: bool = True) -> torch.Tensor:
        B, S, T, D = x.shape
        xt = rearrange(x, "b s t d -> (b s) t d")
        xt = xt + self.t_attn(self.t_norm1(xt))
        xt = xt + self.t_ffn(self.t_norm2(xt))
        xs = rearrange(xt, "(b s) t d -> (b t) s d", b=B)
        if spatial_mixing:
            xs = xs + self.s_attn(self.s_norm1(xs))
        xs = xs + self.s_ffn(self.s_norm2(xs))
        return rearrange(xs, "(b t) s d -> b s t d", b=B)


class TSForecaster(nn.Module):
    def __init__(self, cfg: AiwpConfig, latent_dims: Dict[str, int], tokens_side: int, time_window: int):
        super().__init__()
        self.cfg = cfg
        self.latent_dims = dict(latent_dims)
        self.channels = sum(latent_dims.values())
        self.tokens_side = tokens_side
        self.time_window = time_window
        self.side = 3 * tokens_side
        self.in_proj = nn.Linear(self.channels, cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.side * self.side, time_window, cfg.dim))
        self.blocks = nn.ModuleList([TSBlock(cfg.dim, cfg.heads) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        self.head = nn.Linear(cfg.dim, self.channels)
        # test hook: False replaces every spatial attention with identity
        self.spatial_mixing = True
        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward_all(self, x: torch.Tensor) -> torch.Tensor:
        """[B, 3g, 3g, T, sum L] -> predictions for the whole mosaic, same shape."""
        expected = (self.side, self.side, self.time_window, self.channels)
        if tuple(x.shape[1:]) != expected:
            raise ArgumentError(f"forecaster expects [B, {expected}], got {tuple(x.shape)}")
        h = self.in_proj(rearrange(x, "b h w t c -> b (h w) t c")) + self.pos_embed
        for blk in self.blocks:
            h = blk(h, spatial_mixing=self.spatial_mixing)
        out = self.head(self.norm(h))
        return rearrange(out, "b (h w) t c -> b h w t c", h=self.side)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Centre tile of the next window: [B, g, g, T, sum L]."""
        g = self.tokens_side
        return self.forward_all(x)[:, g:2 * g, g:2 * g]


def ts_forward(model: TSForecaster, x: np.ndarray) -> np.ndarray:
    """One CBC input [3g, 3g, T, sum L] -> centre prediction [g, g, T, sum L]."""
    with torch.no_grad():
        return model(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None])[0].numpy()


class AiwpBundle:
    def __init__(self, model: TSForecaster, cfg: AiwpConfig):
        self.model = model.eval()
        self.cfg = cfg

    @property
    def modalities(self) -> List[str]:
        return list(self.model.latent_dims)

    def save(self, path: Union[str, Path]) -> Path:
        meta = {
            "kind": "aiwp",
            "latent_dims": ",".join(f"{m}:{d}" for m, d in self.model.latent_dims.items()),
            "tokens_side": str(self.model.tokens_side),
            "time_window": str(self.model.time_window),
            "config": self.cfg.model_dump_json(),
        }
        return write_checkpoint(export_params(self.model), path, meta=meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AiwpBundle":
        arrays, meta = read_checkpoint(path)
        if meta.get("kind") != "aiwp":
            raise ContractError(f"{path} is a {meta.get('kind')!r} checkpoint, expected 'aiwp'")
        dims = {}
        for item in meta["latent_dims"].split(","):
            name, _, d = item.partition(":")
            dims[name] = int(d)
        cfg = AiwpConfig.model_validate_json(meta["config"])
        model = TSForecaster(cfg, dims, int(meta["tokens_side"]), int(meta["time_window"]))
        import_params(model, arrays)
        return cls(model, cfg)


# ---------------------------------------------------------------------------
# training

def token_archive(aida: AidaBundle, encoded: Dict[str, EncodedField], starts: Sequence[int], spec: GridSpec,
                  tokens_side: int, init_mode: str = "aida") -> Dict[int, TokenBuffers]:
    """
    Whole-globe token buffers for every window start.

    aida: assimilated windows. raw: scaled VAE latents with unobserved
    tokens set to zero.
    """
    T = aida.model.time_window
    archive: Dict[int, TokenBuffers] = {}
    for start in starts:
        latents, observed = window_batch(encoded, aida.scaler, start, T)
        if init_mode == "aida":
            filled = complete_windows(aida, latents, observed)
        else:
            filled = {m: np.where(observed[m][..., None], latents[m], 0.0).astype(np.float32) for m in latents}
        archive[start] = {
            m: to_cache_layout(rearrange(filled[m], "(i j) n t l -> i j n t l", i=spec.tiles_h), tokens_side)
            for m in aida.modalities
        }
    return archive


def training_pairs(hour_range: Tuple[int, int], time_window: int) -> List[int]:
    """Input window starts whose following window also lies inside the range."""
    return window_starts(hour_range, 2 * time_window)


def border_loss(model: TSForecaster, x: torch.Tensor, target_mosaic: torch.Tensor) -> torch.Tensor:
    """MSE over the 8 border tiles of the mosaic prediction."""
    g = model.tokens_side
    pred = model.forward_all(x)
    mask = torch.ones(pred.shape, dtype=torch.bool)
    mask[:, g:2 * g, g:2 * g] = False
    return masked_mse_loss(pred, target_mosaic, mask=mask)


def train_aiwp(archive: Dict[int, TokenBuffers], starts: Sequence[int], latent_dims: Dict[str, int],
               spec: GridSpec, tokens_side: int, time_window: int, cfg: AiwpConfig, seed: int,
               log_path: Optional[Union[str, Path]] = None) -> AiwpBundle:
    """
    Train on (window, next window) pairs drawn from `archive`. The loss is
    the MSE on the centre tile; border predictions are logged but never
    trained on.
    """
    modalities = list(latent_dims)
    starts = [s for s in starts if s in archive and s + time_window in archive]
    if not starts:
        raise ContractError("no (window, next window) pair in the token archive")
    coords = spec.tile_coords()
    seed_everything(seed)
    model = TSForecaster(cfg, latent_dims, tokens_side, time_window)
    g = tokens_side

    def sample_batch(rng: np.random.Generator):
        xs, ys, border_targets = [], [], []
        for _ in range(cfg.optim.batch_size):
            start = starts[rng.integers(len(starts))]
            coord = coords[rng.integers(len(coords))]
            xs.append(mosaic_from_buffers(archive[start], modalities, coord, cbc=cfg.cbc))
            target = mosaic_from_buffers(archive[start + time_window], modalities, coord, cbc=True)
            border_targets.append(target)
            ys.append(target[g:2 * g, g:2 * g])
        return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)), torch.from_numpy(np.stack(border_targets))

    def compute_loss(model: TSForecaster, batch):
        x, y, target_mosaic = batch
        center = masked_mse_loss(model(x), y)
        with torch.no_grad():
            border = border_loss(model, x, target_mosaic)
        return center, {"center_loss": float(center.detach()), "border_loss": float(border)}

    train_model(model, sample_batch, compute_loss, cfg.optim, seed=seed, log_path=log_path,
                stage=f"aiwp[{cfg.init_mode}{'' if cfg.cbc else ',no-cbc'}]",
                log_columns=["step", "lr", "center_loss", "border_loss"])
    return AiwpBundle(model, cfg)


@torch.no_grad()
def evaluate_aiwp(bundle: AiwpBundle, archive: Dict[int, TokenBuffers], starts: Sequence[int],
                  spec: GridSpec) -> Dict[str, float]:
    """Centre-tile latent MSE over every tile of every pair, next to latent persistence (last input frame repeated)."""
    model = bundle.model
    modalities = bundle.modalities
    g, T = model.tokens_side, model.time_window
    sq_model, sq_persist, count = 0.0, 0.0, 0
    for start in starts:
        if start not in archive or start + T not in archive:
            continue
        xs = np.stack([mosaic_from_buffers(archive[start], modalities, c, cbc=bundle.cfg.cbc) for c in spec.tile_coords()])
        ys = np.stack([mosaic_from_buffers(archive[start + T], modalities, c, cbc=True)[g:2 * g, g:2 * g]
                       for c in spec.tile_coords()])
        pred = model(torch.from_numpy(xs)).numpy()
        last = xs[:, g:2 * g, g:2 * g, T - 1:T]
        sq_model += float(((pred - ys) ** 2).sum())
        sq_persist += float(((last - ys) ** 2).sum())
        count += ys.size
    if count == 0:
        raise ContractError("no evaluation pair in the token archive")
    return {"center_mse": sq_model / count, "persistence_mse": sq_persist / count}


# ---------------------------------------------------------------------------
# rollout

class RolloutResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    tokens: List[TokenBuffers]                      # one entry per step, scaled latents
    timestamps: List[List[int]]                     # hours covered by each step
    fields: Dict[int, Dict[str, GriddedField]]      # decoded steps, 1-based


def rollout(initial: Union[Dict[str, GriddedField], ImputedWindow], vaes: Dict[str, VaeBundle], aida: AidaBundle,
            aiwp: AiwpBundle, spec: GridSpec, steps: int, decode_steps: Optional[Sequence[int]] = None,
            cbc: Optional[bool] = None, order: Optional[Sequence[Tuple[int, int]]] = None) -> RolloutResult:
    """
    Forecast `steps` windows ahead. The initial window is assimilated and
    loaded into the previous buffer; each step sweeps every tile (in `order`,
    default row-major), predicts it from the previous buffer and writes the
    current one; the completed sweep swaps the buffers.
    """
    if steps < 1:
        raise ArgumentError("rollout needs at least one step")
    model = aiwp.model
    if aiwp.modalities != aida.modalities:
        raise ContractError(f"forecaster modalities {aiwp.modalities} differ from assimilation {aida.modalities}")
    cbc = aiwp.cfg.cbc if cbc is None else cbc
    imputed = initial if isinstance(initial, ImputedWindow) else impute_window(initial, vaes, aida, spec, decode=False)
    T = model.time_window
    cache = init_cache(spec, model.latent_dims, T, model.tokens_side)
    cache.load_previous(imputed.tokens)
    sweep = [TileCoord(int(r), int(c)) for r, c in (order or spec.tile_coords())]
    if sorted(sweep) != spec.tile_coords():
        raise ArgumentError("sweep order must visit every tile exactly once")

    last_hour = imputed.timestamps[-1]
    result = RolloutResult(tokens=[], timestamps=[], fields={})
    for step in range(1, steps + 1):
        for coord in sweep:
            center = {m: cache.tile(m, coord) for m in cache.modalities}
            pred = ts_forward(model, assemble_cbc(cache, center, coord, cbc=cbc))
            cache.update_cache(coord, split_channels(pred, model.latent_dims))
        hours = list(range(last_hour + 1 + (step - 1) * T, last_hour + 1 + step * T))
        result.tokens.append({m: cache.previous(m).copy() for m in cache.modalities})
        result.timestamps.append(hours)
        logger.info(f"Rollout step {step}/{steps}: hours {hours[0]}-{hours[-1]}")
    for step in sorted(set(decode_steps or [])):
        if not 1 <= step <= steps:
            raise ArgumentError(f"decode step {step} outside 1..{steps}")
        result.fields[step] = {m: decode_tokens(result.tokens[step - 1][m], vaes[m], aida.scaler, result.timestamps[step - 1])
                               for m in aida.modalities}
    return result
