"""
Observation-space assimilation: a multi-modal masked autoencoder over the
latent tokens of every modality in one tile's time window. Observed tokens
are packed into a fixed-length sequence padded with [EOS]; the decoder fills
every slot.
"""
from typing import Dict, List, Optional, Tuple, Union
from pathlib import Path
import logging

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange
from pydantic import BaseModel, ConfigDict, Field

from src.data_processing import merge_tiles, split_tiles, window_starts
from src.exceptions import ArgumentError, ContractError, InsufficientObservations
from src.grid import GridSpec
from src.mvae import VaeBundle
from src.nncore import (
    LN_EPS,
    OptimConfig,
    TransformerBlock,
    export_params,
    import_params,
    init_weights,
    masked_mse_loss,
)
from src.obsio import GriddedField, denormalize, normalize, read_checkpoint, write_checkpoint
from src.training import train_model
from src.utils import seed_everything

logger = logging.getLogger(__name__)


class AidaConfig(BaseModel):
    enc_dim: int = 64
    enc_depth: int = 4
    dec_dim: int = 48
    dec_depth: int = 3
    heads: int = 4
    keep: int = 16
    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(total_steps=3000, batch_size=16, log_every=100))


class TokenWindow(BaseModel):
    """One tile's window: per modality latents [N, T, L] and observed flags [N, T]."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    latents: Dict[str, np.ndarray]
    observed: Dict[str, np.ndarray]

    def slot_flags(self) -> np.ndarray:
        """Observed flags in slot order: modality-major, then token, then time."""
        return np.concatenate([self.observed[m].reshape(-1) for m in self.latents])


class PackedSequence(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    kept_idx: np.ndarray   # [L] slot indices; padding entries point at the dummy slot S
    valid: np.ndarray      # [L] bool, False at [EOS] padding
    targets: np.ndarray    # [S] bool, observed but not kept
    eos_count: int

    @property
    def length(self) -> int:
        return int(self.kept_idx.shape[0])


def pack(flags: np.ndarray, keep: int, mode: str, rng: Optional[np.random.Generator] = None,
         length: Optional[int] = None) -> PackedSequence:
    """
    Choose the tokens the encoder sees.

    train: `keep` observed slots drawn uniformly without replacement; the
    remaining observed slots become reconstruction targets.
    infer: every observed slot is kept and nothing is a target.
    The kept list is padded with [EOS] to `length` (default `keep` in train
    mode, the slot count in infer mode).
    """
    total = flags.shape[0]
    observed = np.flatnonzero(flags)
    targets = np.zeros(total, dtype=bool)
    if mode == "train":
        if observed.size < keep:
            raise InsufficientObservations(f"{observed.size} observed tokens, need {keep}")
        rng = rng if rng is not None else np.random.default_rng(0)
        kept = np.sort(rng.choice(observed, size=keep, replace=False))
        targets[observed] = True
        targets[kept] = False
        length = keep if length is None else length
    elif mode == "infer":
        kept = observed
        length = total if length is None else length
    else:
        raise ArgumentError(f"unknown pack mode {mode!r}")
    if kept.size > length:
        raise ArgumentError(f"{kept.size} kept tokens exceed packed length {length}")
    kept_idx = np.full(length, total, dtype=np.int64)
    kept_idx[:kept.size] = kept
    valid = np.zeros(length, dtype=bool)
    valid[:kept.size] = True
    return PackedSequence(kept_idx=kept_idx, valid=valid, targets=targets, eos_count=length - kept.size)


class LatentScaler(BaseModel):
    """Per-modality, per-latent-channel standardisation of VAE latents."""

    mean: Dict[str, List[float]]
    std: Dict[str, List[float]]

    def scale(self, modality: str, z: np.ndarray) -> np.ndarray:
        return ((z - np.asarray(self.mean[modality], dtype=np.float32)) / np.asarray(self.std[modality], dtype=np.float32)).astype(np.float32)

    def unscale(self, modality: str, z: np.ndarray) -> np.ndarray:
        return (z * np.asarray(self.std[modality], dtype=np.float32) + np.asarray(self.mean[modality], dtype=np.float32)).astype(np.float32)


class EncodedField(BaseModel):
    """Mean-mode VAE latents of one modality for every tile and hour."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    modality: str
    z: np.ndarray          # [tiles_h, tiles_w, hours, N, L]
    observed: np.ndarray   # [tiles_h, tiles_w, hours, N]
    timestamps: List[int]

    def hour_index(self, hour: int) -> int:
        try:
            return self.timestamps.index(hour)
        except ValueError:
            raise ArgumentError(f"{self.modality}: hour {hour} not encoded")


def encode_field(vae: VaeBundle, field: GriddedField, tile: int) -> EncodedField:
    """Normalise a raw field with the VAE's statistics and encode every (tile, hour)."""
    tiles = split_tiles(normalize(field, vae.stats).data, tile)
    th, tw = tiles.shape[:2]
    flat = rearrange(tiles, "i j t c h w -> (i j t) c h w")
    z, observed = vae.encode_tiles(flat)
    T = field.data.shape[0]
    return EncodedField(
        modality=field.modality,
        z=rearrange(z, "(i j t) n l -> i j t n l", i=th, j=tw, t=T),
        observed=rearrange(observed, "(i j t) n -> i j t n", i=th, j=tw, t=T),
        timestamps=list(field.timestamps),
    )


def fit_latent_scaler(encoded: Dict[str, EncodedField]) -> LatentScaler:
    mean, std = {}, {}
    for m, enc in encoded.items():
        values = enc.z[enc.observed].astype(np.float64)
        if values.shape[0] < 2:
            raise ContractError(f"{m}: fewer than 2 observed latent tokens")
        mean[m] = values.mean(axis=0).tolist()
        std[m] = np.maximum(values.std(axis=0), 1e-6).tolist()
    return LatentScaler(mean=mean, std=std)


def to_cache_layout(z: np.ndarray, grid: int) -> np.ndarray:
    """[i, j, N, T, L] -> [i, j, T, L, th, tw]."""
    return rearrange(z, "i j (h w) t l -> i j t l h w", h=grid, w=grid)


def from_cache_layout(tokens: np.ndarray) -> np.ndarray:
    """[i, j, T, L, th, tw] -> [i, j, N, T, L]."""
    return rearrange(tokens, "i j t l h w -> i j (h w) t l")


class AssimilationMAE(nn.Module):
    def __init__(self, cfg: AidaConfig, latent_dims: Dict[str, int], num_tokens: int, time_window: int):
        super().__init__()
        self.cfg = cfg
        self.modalities = list(latent_dims)
        self.latent_dims = dict(latent_dims)
        self.num_tokens = num_tokens
        self.time_window = time_window
        per_modality = num_tokens * time_window
        self.num_slots = per_modality * len(self.modalities)

        slots = torch.arange(self.num_slots)
        self.register_buffer("slot_mod", slots // per_modality, persistent=False)
        self.register_buffer("slot_pos", (slots % per_modality) // time_window, persistent=False)
        self.register_buffer("slot_time", slots % time_window, persistent=False)

        E, Dd = cfg.enc_dim, cfg.dec_dim
        self.in_proj = nn.ModuleDict({m: nn.Linear(d, E) for m, d in latent_dims.items()})
        self.enc_pos = nn.Parameter(torch.zeros(num_tokens, E))
        self.enc_time = nn.Parameter(torch.zeros(time_window, E))
        self.enc_mod = nn.Parameter(torch.zeros(len(self.modalities), E))
        self.eos_token = nn.Parameter(torch.zeros(E))
        self.enc_blocks = nn.ModuleList([TransformerBlock(E, cfg.heads) for _ in range(cfg.enc_depth)])
        self.enc_norm = nn.LayerNorm(E, eps=LN_EPS)
        self.to_dec = nn.Linear(E, Dd)

        self.mask_token = nn.Parameter(torch.zeros(Dd))
        self.dec_pos = nn.Parameter(torch.zeros(num_tokens, Dd))
        self.dec_time = nn.Parameter(torch.zeros(time_window, Dd))
        self.dec_mod = nn.Parameter(torch.zeros(len(self.modalities), Dd))
        self.dec_blocks = nn.ModuleList([TransformerBlock(Dd, cfg.heads) for _ in range(cfg.dec_depth)])
        self.dec_norm = nn.LayerNorm(Dd, eps=LN_EPS)
        self.heads_out = nn.ModuleDict({
            m: nn.Sequential(nn.LayerNorm(Dd, eps=LN_EPS), nn.Linear(Dd, d)) for m, d in latent_dims.items()
        })

        self.apply(init_weights)
        for p in (self.enc_pos, self.enc_time, self.enc_mod, self.eos_token,
                  self.mask_token, self.dec_pos, self.dec_time, self.dec_mod):
            nn.init.trunc_normal_(p, std=0.02)

    def embed_slots(self, latents: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Per modality [B, N, T, L] -> [B, S, enc_dim] with slot embeddings added."""
        parts = []
        for m in self.modalities:
            z = latents[m]
            if tuple(z.shape[1:]) != (self.num_tokens, self.time_window, self.latent_dims[m]):
                raise ArgumentError(f"{m}: latents {tuple(z.shape)} do not match the model")
            parts.append(rearrange(self.in_proj[m](z), "b n t e -> b (n t) e"))
        tokens = torch.cat(parts, dim=1)
        return tokens + self.enc_pos[self.slot_pos] + self.enc_time[self.slot_time] + self.enc_mod[self.slot_mod]

    def forward(self, latents: Dict[str, torch.Tensor], kept_idx: torch.Tensor,
                valid: torch.Tensor) -> Dict[str, torch.Tensor]:
        """
        kept_idx: [B, L] slot indices, S at padding; valid: [B, L].
        Returns predicted latents for every slot, per modality [B, N, T, L_m].
        """
        tokens = self.embed_slots(latents)
        B, S, E = tokens.shape
        padded = torch.cat([tokens, tokens.new_zeros(B, 1, E)], dim=1)
        h = torch.gather(padded, 1, kept_idx[..., None].expand(-1, -1, E))
        h = torch.where(valid[..., None], h, self.eos_token.expand_as(h))
        inert = ~valid.any(dim=-1)
        for blk in self.enc_blocks:
            h = blk(h, key_mask=valid, inert=inert)
        h = self.to_dec(self.enc_norm(h))

        Dd = h.shape[-1]
        # [EOS] rows land on the dummy slot S, which is dropped
        canvas = self.mask_token.expand(B, S + 1, Dd)
        canvas = canvas.scatter(1, kept_idx[..., None].expand(-1, -1, Dd), h)[:, :S]
        x = canvas + self.dec_pos[self.slot_pos] + self.dec_time[self.slot_time] + self.dec_mod[self.slot_mod]
        for blk in self.dec_blocks:
            x = blk(x)
        x = self.dec_norm(x)

        out = {}
        per_modality = self.num_tokens * self.time_window
        for k, m in enumerate(self.modalities):
            part = x[:, k * per_modality:(k + 1) * per_modality]
            out[m] = rearrange(self.heads_out[m](part), "b (n t) l -> b n t l", n=self.num_tokens)
        return out


def collate(windows: List[TokenWindow], packs: List[PackedSequence]) -> Tuple[Dict[str, torch.Tensor], torch.Tensor, torch.Tensor]:
    latents = {m: torch.from_numpy(np.stack([w.latents[m] for w in windows]).astype(np.float32)) for m in windows[0].latents}
    kept_idx = torch.from_numpy(np.stack([p.kept_idx for p in packs]))
    valid = torch.from_numpy(np.stack([p.valid for p in packs]))
    return latents, kept_idx, valid


def assimilate(model: AssimilationMAE, window: TokenWindow, seq: PackedSequence) -> TokenWindow:
    """Fill every slot of one window; observed slots keep their input latents."""
    latents, kept_idx, valid = collate([window], [seq])
    with torch.no_grad():
        pred = model(latents, kept_idx, valid)
    filled = {m: np.where(window.observed[m][..., None], window.latents[m], pred[m][0].numpy()).astype(np.float32)
              for m in model.modalities}
    return TokenWindow(latents=filled, observed={m: np.ones_like(window.observed[m]) for m in model.modalities})


class AidaBundle:
    def __init__(self, model: AssimilationMAE, scaler: LatentScaler, cfg: AidaConfig):
        self.model = model.eval()
        self.scaler = scaler
        self.cfg = cfg

    @property
    def modalities(self) -> List[str]:
        return self.model.modalities

    def save(self, path: Union[str, Path]) -> Path:
        meta = {
            "kind": "aida",
            "latent_dims": ",".join(f"{m}:{d}" for m, d in self.model.latent_dims.items()),
            "num_tokens": str(self.model.num_tokens),
            "time_window": str(self.model.time_window),
            "config": self.cfg.model_dump_json(),
            "scaler": self.scaler.model_dump_json(),
        }
        return write_checkpoint(export_params(self.model), path, meta=meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AidaBundle":
        arrays, meta = read_checkpoint(path)
        if meta.get("kind") != "aida":
            raise ContractError(f"{path} is a {meta.get('kind')!r} checkpoint, expected 'aida'")
        dims = {}
        for item in meta["latent_dims"].split(","):
            name, _, d = item.partition(":")
            dims[name] = int(d)
        cfg = AidaConfig.model_validate_json(meta["config"])
        model = AssimilationMAE(cfg, dims, int(meta["num_tokens"]), int(meta["time_window"]))
        import_params(model, arrays)
        return cls(model, LatentScaler.model_validate_json(meta["scaler"]), cfg)


def window_batch(encoded: Dict[str, EncodedField], scaler: LatentScaler, start: int,
                 time_window: int) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Scaled latents [n_tiles, N, T, L] and flags [n_tiles, N, T] for the window starting at `start`."""
    latents, observed = {}, {}
    for m, enc in encoded.items():
        i0 = enc.hour_index(start)
        z = enc.z[:, :, i0:i0 + time_window]
        if z.shape[2] != time_window:
            raise ArgumentError(f"{m}: window at hour {start} runs past the encoded hours")
        z = scaler.scale(m, z)
        obs = enc.observed[:, :, i0:i0 + time_window]
        latents[m] = rearrange(z, "i j t n l -> (i j) n t l")
        observed[m] = rearrange(obs, "i j t n -> (i j) n t")
    return latents, observed


def complete_windows(bundle: AidaBundle, latents: Dict[str, np.ndarray], observed: Dict[str, np.ndarray],
                     batch_size: int = 64) -> Dict[str, np.ndarray]:
    """Infer-mode assimilation of many windows; returns completed scaled latents per modality [n, N, T, L]."""
    model = bundle.model
    n = next(iter(latents.values())).shape[0]
    out = {m: np.empty_like(latents[m]) for m in model.modalities}
    for start in range(0, n, batch_size):
        stop = min(n, start + batch_size)
        windows = [TokenWindow(latents={m: latents[m][k] for m in model.modalities},
                               observed={m: observed[m][k] for m in model.modalities}) for k in range(start, stop)]
        packs = [pack(w.slot_flags(), bundle.cfg.keep, "infer", length=model.num_slots) for w in windows]
        z, kept_idx, valid = collate(windows, packs)
        with torch.no_grad():
            pred = model(z, kept_idx, valid)
        for m in model.modalities:
            obs = observed[m][start:stop][..., None]
            out[m][start:stop] = np.where(obs, latents[m][start:stop], pred[m].numpy())
    return out


class ImputedWindow(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    tokens: Dict[str, np.ndarray]                       # scaled, [tiles_h, tiles_w, T, L, th, tw]
    timestamps: List[int]
    fields: Optional[Dict[str, GriddedField]] = None    # dense, physical units


def decode_tokens(tokens: np.ndarray, vae: VaeBundle, scaler: LatentScaler, timestamps: List[int]) -> GriddedField:
    """Scaled cache-layout tokens -> dense field in physical units."""
    modality = vae.modality
    th, tw = tokens.shape[:2]
    z = scaler.unscale(modality, rearrange(tokens, "i j t l h w -> (i j t) (h w) l"))
    tiles = vae.decode_tiles(z)
    tiles = rearrange(tiles, "(i j t) c h w -> i j t c h w", i=th, j=tw)
    normalized = GriddedField(modality=modality, data=merge_tiles(tiles), timestamps=timestamps)
    return denormalize(normalized, vae.stats)


def impute_window(fields: Dict[str, GriddedField], vaes: Dict[str, VaeBundle], aida: AidaBundle,
                  spec: GridSpec, decode: bool = True) -> ImputedWindow:
    """Encode every tile of a raw multi-modality window, assimilate, and optionally decode densely."""
    missing = [m for m in aida.modalities if m not in fields or m not in vaes]
    if missing:
        raise ContractError(f"window or VAE checkpoints missing modalities {missing}")
    timestamps = list(fields[aida.modalities[0]].timestamps)
    T = aida.model.time_window
    if len(timestamps) != T:
        raise ContractError(f"window has {len(timestamps)} hours, AIDA was trained on {T}")
    encoded = {}
    for m in aida.modalities:
        fields[m].check_grid(spec)
        if fields[m].timestamps != timestamps:
            raise ContractError(f"{m}: timestamps differ from {aida.modalities[0]}")
        encoded[m] = encode_field(vaes[m], fields[m], spec.tile)
    latents, observed = window_batch(encoded, aida.scaler, timestamps[0], T)
    completed = complete_windows(aida, latents, observed)
    grid = vaes[aida.modalities[0]].model.grid
    tokens = {m: to_cache_layout(rearrange(completed[m], "(i j) n t l -> i j n t l", i=spec.tiles_h), grid)
              for m in aida.modalities}
    result = ImputedWindow(tokens=tokens, timestamps=timestamps)
    if decode:
        result.fields = {m: decode_tokens(tokens[m], vaes[m], aida.scaler, timestamps) for m in aida.modalities}
    return result


# ---------------------------------------------------------------------------
# training

def train_aida(encoded: Dict[str, EncodedField], latent_dims: Dict[str, int], num_tokens: int,
               hour_range: Tuple[int, int], time_window: int, cfg: AidaConfig, seed: int,
               log_path: Optional[Union[str, Path]] = None) -> AidaBundle:
    """
    Train the MAE to reconstruct observed-but-masked latents of training windows.

    Args:
    encoded: Frozen-encoder latents per modality covering `hour_range`
    latent_dims: Latent channels per modality, in slot order
    num_tokens: Tokens per tile
    hour_range: Half-open training hours
    time_window: Window length T
    cfg: Model and optimiser settings
    seed: Training seed
    log_path: Training log CSV

    Returns:
    The trained bundle, carrying the latent scaler fitted on training latents
    """
    scaler = fit_latent_scaler(encoded)
    starts = window_starts(hour_range, time_window)
    pool_latents, pool_observed = [], []
    for start in starts:
        latents, observed = window_batch(encoded, scaler, start, time_window)
        pool_latents.append(latents)
        pool_observed.append(observed)
    n_tiles = next(iter(pool_latents[0].values())).shape[0]
    counts = np.array([[sum(int(obs[m][k].sum()) for m in obs) for k in range(n_tiles)] for obs in pool_observed])
    # a window needs at least one target beyond the kept tokens
    eligible = np.argwhere(counts > cfg.keep)
    if eligible.shape[0] == 0:
        raise ContractError(f"no training window has more than {cfg.keep} observed tokens")
    logger.info(f"AIDA: {eligible.shape[0]} of {counts.size} training windows eligible")

    seed_everything(seed)
    model = AssimilationMAE(cfg, latent_dims, num_tokens, time_window)

    def sample_batch(rng: np.random.Generator):
        windows, packs, targets = [], [], []
        while len(windows) < cfg.optim.batch_size:
            w, k = eligible[rng.integers(eligible.shape[0])]
            window = TokenWindow(latents={m: pool_latents[w][m][k] for m in latent_dims},
                                 observed={m: pool_observed[w][m][k] for m in latent_dims})
            try:
                seq = pack(window.slot_flags(), cfg.keep, "train", rng=rng)
            except InsufficientObservations:
                continue
            windows.append(window)
            packs.append(seq)
            targets.append(seq.targets)
        latents, kept_idx, valid = collate(windows, packs)
        return latents, kept_idx, valid, torch.from_numpy(np.stack(targets))

    def compute_loss(model: AssimilationMAE, batch):
        latents, kept_idx, valid, targets = batch
        pred = model(latents, kept_idx, valid)
        loss = target_mse(model, pred, latents, targets)
        return loss, {}

    train_model(model, sample_batch, compute_loss, cfg.optim, seed=seed, log_path=log_path, stage="aida",
                log_columns=["step", "lr", "loss"])
    return AidaBundle(model, scaler, cfg)


def target_mse(model: AssimilationMAE, pred: Dict[str, torch.Tensor], latents: Dict[str, torch.Tensor],
               targets: torch.Tensor) -> torch.Tensor:
    """MSE over target slots only; targets is [B, S] in slot order."""
    per_modality = model.num_tokens * model.time_window
    preds, trues, masks = [], [], []
    for k, m in enumerate(model.modalities):
        mask = rearrange(targets[:, k * per_modality:(k + 1) * per_modality], "b (n t) -> b n t", n=model.num_tokens)
        preds.append(pred[m].reshape(pred[m].shape[0], -1))
        trues.append(latents[m].reshape(latents[m].shape[0], -1))
        masks.append(mask[..., None].expand_as(pred[m]).reshape(pred[m].shape[0], -1))
    return masked_mse_loss(torch.cat(preds, dim=1), torch.cat(trues, dim=1), mask=torch.cat(masks, dim=1))


@torch.no_grad()
def evaluate_aida(bundle: AidaBundle, encoded: Dict[str, EncodedField], hour_range: Tuple[int, int],
                  seed: int, stride: Optional[int] = None) -> Dict[str, float]:
    """Held-out target-slot MSE next to the variance of the target latents (the mean predictor's MSE)."""
    model = bundle.model
    T = model.time_window
    rng = np.random.default_rng(seed)
    sq_err, sq_dev, values, count = 0.0, 0.0, [], 0
    for start in window_starts(hour_range, T, stride or T):
        latents, observed = window_batch(encoded, bundle.scaler, start, T)
        n = next(iter(latents.values())).shape[0]
        for k in range(n):
            window = TokenWindow(latents={m: latents[m][k] for m in model.modalities},
                                 observed={m: observed[m][k] for m in model.modalities})
            flags = window.slot_flags()
            if flags.sum() <= bundle.cfg.keep:
                continue
            seq = pack(flags, bundle.cfg.keep, "train", rng=rng)
            z, kept_idx, valid = collate([window], [seq])
            pred = model(z, kept_idx, valid)
            per_modality = model.num_tokens * T
            for j, m in enumerate(model.modalities):
                mask = seq.targets[j * per_modality:(j + 1) * per_modality].reshape(model.num_tokens, T)
                true = window.latents[m][mask]
                sq_err += float(((pred[m][0].numpy()[mask] - true) ** 2).sum())
                values.append(true)
                count += true.size
    if count == 0:
        raise ContractError("no held-out window has target slots")
    stacked = np.concatenate([v.reshape(-1, v.shape[-1]) for v in values])
    variance = float(((stacked - stacked.mean(axis=0)) ** 2).sum() / count)
    return {"target_mse": sq_err / count, "target_variance": variance}
