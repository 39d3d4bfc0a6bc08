"""Stage checkpoints loaded as one object, plus the dataset plumbing the subcommands share."""
from typing import Dict, List, Optional, Sequence, Tuple, Union
from pathlib import Path
import logging

import numpy as np

from src.aida import AidaBundle, EncodedField, ImputedWindow, encode_field, impute_window
from src.aiwp import AiwpBundle, RolloutResult, TokenBuffers, rollout, token_archive
from src.data_processing import load_modality, window_starts
from src.exceptions import ArgumentError, ContractError
from src.grid import GridSpec
from src.mvae import VaeBundle
from src.obsio import GriddedField, merge_time, read_checkpoint, write_checkpoint
from src.precipmap import PrecipBundle

logger = logging.getLogger(__name__)

AIDA_CKPT = "aida.ckpt"
AIWP_CKPT = "aiwp.ckpt"
PRECIP_CKPT = "precip.ckpt"


def vae_checkpoint(ckpt_dir: Union[str, Path], modality: str) -> Path:
    return Path(ckpt_dir) / f"vae_{modality}.ckpt"


def tokens_checkpoint(out_dir: Union[str, Path], step: int) -> Path:
    return Path(out_dir) / f"tokens_step{step}.ckpt"


def load_vaes(ckpt_dir: Union[str, Path], modalities: Sequence[str]) -> Dict[str, VaeBundle]:
    vaes = {}
    for m in modalities:
        path = vae_checkpoint(ckpt_dir, m)
        if not path.exists():
            raise ContractError(f"missing VAE checkpoint {path}")
        vaes[m] = VaeBundle.load(path)
    return vaes


class Pipeline:
    """The frozen VAEs, the assimilation model and, when trained, the forecaster and precipitation head."""

    def __init__(self, vaes: Dict[str, VaeBundle], aida: AidaBundle, aiwp: Optional[AiwpBundle] = None,
                 precip: Optional[PrecipBundle] = None):
        self.vaes = vaes
        self.aida = aida
        self.aiwp = aiwp
        self.precip = precip

    @property
    def modalities(self) -> List[str]:
        return self.aida.modalities

    @classmethod
    def load(cls, ckpt_dir: Union[str, Path], with_aiwp: bool = True, with_precip: bool = False) -> "Pipeline":
        ckpt_dir = Path(ckpt_dir)
        for name, wanted in ((AIDA_CKPT, True), (AIWP_CKPT, with_aiwp), (PRECIP_CKPT, with_precip)):
            if wanted and not (ckpt_dir / name).exists():
                raise ContractError(f"missing checkpoint {ckpt_dir / name}")
        aida = AidaBundle.load(ckpt_dir / AIDA_CKPT)
        vaes = load_vaes(ckpt_dir, aida.modalities)
        aiwp = AiwpBundle.load(ckpt_dir / AIWP_CKPT) if with_aiwp else None
        precip = PrecipBundle.load(ckpt_dir / PRECIP_CKPT) if with_precip else None
        logger.info(f"Pipeline loaded from: {ckpt_dir} (modalities {', '.join(aida.modalities)})")
        return cls(vaes, aida, aiwp, precip)

    @property
    def time_window(self) -> int:
        return self.aida.model.time_window

    def assimilate(self, fields: Dict[str, GriddedField], spec: GridSpec, decode: bool = True) -> ImputedWindow:
        return impute_window(fields, self.vaes, self.aida, spec, decode=decode)

    def forecast(self, initial: Union[Dict[str, GriddedField], ImputedWindow], spec: GridSpec, steps: int,
                 decode_steps: Optional[Sequence[int]] = None, cbc: Optional[bool] = None) -> RolloutResult:
        if self.aiwp is None:
            raise ContractError("pipeline was loaded without the forecaster")
        return rollout(initial, self.vaes, self.aida, self.aiwp, spec, steps, decode_steps=decode_steps, cbc=cbc)

    def forecast_fields(self, fields: Dict[str, GriddedField], spec: GridSpec, steps: int,
                        cbc: Optional[bool] = None) -> Dict[str, GriddedField]:
        """Decoded forecast over all `steps` windows, one field per modality."""
        result = self.forecast(fields, spec, steps, decode_steps=range(1, steps + 1), cbc=cbc)
        return stitch_steps(result, self.modalities)


def stitch_steps(result: RolloutResult, modalities: Sequence[str]) -> Dict[str, GriddedField]:
    if not result.fields:
        raise ArgumentError("rollout has no decoded step")
    return {m: merge_time([result.fields[step][m] for step in sorted(result.fields)]) for m in modalities}


def load_window(data_dir: Union[str, Path], modalities: Sequence[str], start: int, length: int,
                jobs: int = 1) -> Dict[str, GriddedField]:
    """Raw gridded observations of every modality for hours [start, start + length)."""
    if start < 0:
        raise ArgumentError(f"window start {start} is negative")
    return {m: load_modality(data_dir, m, range(start, start + length), jobs=jobs) for m in modalities}


def encode_dataset(vaes: Dict[str, VaeBundle], data_dir: Union[str, Path], hour_range: Tuple[int, int],
                   spec: GridSpec, jobs: int = 1) -> Dict[str, EncodedField]:
    """Frozen-encoder latents of every modality over a half-open hour range."""
    encoded = {}
    for m, vae in vaes.items():
        field = load_modality(data_dir, m, range(*hour_range), jobs=jobs)
        encoded[m] = encode_field(vae, field, spec.tile)
        logger.info(f"Encoded {m}: hours {hour_range[0]}-{hour_range[1] - 1}, "
                    f"{float(encoded[m].observed.mean()):.3f} of tokens observed")
    return encoded


def completed_tokens(aida: AidaBundle, encoded: Dict[str, EncodedField], hour_range: Tuple[int, int],
                     spec: GridSpec, tokens_side: int, init_mode: str = "aida") -> Tuple[TokenBuffers, List[int]]:
    """Back-to-back assimilated windows over the range, concatenated along T: [i, j, hours, L, th, tw]."""
    T = aida.model.time_window
    starts = window_starts(hour_range, T, T)
    if not starts:
        raise ArgumentError(f"hour range {hour_range} holds no {T}-hour window")
    archive = token_archive(aida, encoded, starts, spec, tokens_side, init_mode=init_mode)
    tokens = {m: np.concatenate([archive[s][m] for s in starts], axis=2) for m in aida.modalities}
    hours = [h for s in starts for h in range(s, s + T)]
    return tokens, hours


def save_tokens(tokens: TokenBuffers, timestamps: Sequence[int], path: Union[str, Path]) -> Path:
    meta = {
        "kind": "tokens",
        "modalities": ",".join(tokens),
        "timestamps": ",".join(str(t) for t in timestamps),
    }
    return write_checkpoint(dict(tokens), path, meta=meta)


def read_tokens(path: Union[str, Path]) -> Tuple[TokenBuffers, List[int]]:
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "tokens":
        raise ContractError(f"{path} is a {meta.get('kind')!r} checkpoint, expected 'tokens'")
    timestamps = [int(t) for t in meta["timestamps"].split(",")]
    return {m: arrays[m] for m in meta["modalities"].split(",")}, timestamps


def forecast_token_files(pred_dir: Union[str, Path]) -> List[Path]:
    """tokens_step<k>.ckpt files in step order."""
    files = list(Path(pred_dir).glob("tokens_step*.ckpt"))
    return sorted(files, key=lambda p: int(p.stem[len("tokens_step"):]))
