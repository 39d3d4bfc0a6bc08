"""
Training-based experiments: per-layer gradient checks, the forecaster
initialisation and boundary-conditioning ablations, and the comparison
against persistence. Each writes one CSV.
"""
from typing import Dict, List, Optional, Sequence, Tuple, Union
from pathlib import Path
import logging

import numpy as np
import pandas as pd
import torch

from src.aiwp import TSBlock, evaluate_aiwp, token_archive, train_aiwp, training_pairs
from src.config import RunConfig
from src.data_processing import Manifest, load_modality, window_starts
from src.exceptions import ArgumentError
from src.grid import GridSpec
from src.mvae import latent_channels, vae_loss
from src.nncore import (
    GeluFFN,
    GradCheckResult,
    PatchEmbed,
    SwiGLUFFN,
    functional_loss,
    grad_check,
    layer_norm,
    masked_attention,
    module_params,
)
from src.obsio import GriddedField, normalize
from src.pipeline import Pipeline, encode_dataset
from src.utils import save_to_csv
from src.verify import MAE_COLUMNS, mae_rows, persistence_crossover, persistence_forecast, seam_metric

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_COLUMNS = ["layer", "max_rel_error", "worst_param", "passed"]
INIT_COLUMNS = ["seed", "init_mode", "final_loss", "ratio_to_raw"]
CBC_COLUMNS = ["seed", "cbc", "center_mse", "seam"]
PERSISTENCE_COLUMNS = ["lead_h", "model_mae", "persistence_mae"]


# ---------------------------------------------------------------------------
# gradient checks

def _projection(shape: Tuple[int, ...], generator: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=torch.float64)


def layer_grad_checks(dim: int = 16, seed: int = 0, eps: float = 1e-4) -> Dict[str, GradCheckResult]:
    """Central-difference checks of every hand-assembled layer at width `dim`, in float64."""
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    results: Dict[str, GradCheckResult] = {}

    x = torch.randn(3, dim, generator=g, dtype=torch.float64)
    w = _projection((3, dim), g)
    results["layer_norm"] = grad_check(
        lambda p: (layer_norm(p["x"], p["weight"], p["bias"]) * w).sum(),
        {"x": x, "weight": 1.0 + 0.1 * torch.randn(dim, generator=g, dtype=torch.float64),
         "bias": 0.1 * torch.randn(dim, generator=g, dtype=torch.float64)},
        eps=eps,
    )

    q, k, v = (torch.randn(2, 5, dim, generator=g, dtype=torch.float64) for _ in range(3))
    key_mask = torch.tensor([[True, True, False, True, False], [True, False, True, True, True]])
    w_attn = _projection((2, 5, dim), g)
    results["masked_attention"] = grad_check(
        lambda p: (masked_attention(p["q"], p["k"], p["v"], heads=2, key_mask=key_mask) * w_attn).sum(),
        {"q": q, "k": k, "v": v},
        eps=eps,
    )

    tokens = torch.randn(2, 3, dim, generator=g, dtype=torch.float64)
    w_tokens = _projection((2, 3, dim), g)
    for name, ffn in (("gelu_ffn", GeluFFN(dim)), ("swiglu_ffn", SwiGLUFFN(dim))):
        ffn = ffn.double()
        results[name] = grad_check(functional_loss(ffn, lambda m: (m(tokens) * w_tokens).sum()),
                                   module_params(ffn), eps=eps)

    embed = PatchEmbed(in_chans=2, tile=8, patch=4, dim=dim).double()
    image = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    w_embed = _projection((1, 4, dim), g)
    results["patch_embed"] = grad_check(functional_loss(embed, lambda m: (m(image) * w_embed).sum()),
                                        module_params(embed), eps=eps)

    target = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    target[0, 0, 0, :3] = float("nan")
    token_mask = torch.tensor([[True, False, True, True]])
    results["vae_loss"] = grad_check(
        lambda p: vae_loss(target, p["recon"], p["mu"], p["log_sigma"].exp(), 0.5,
                           token_mask=token_mask, patch=4)[0],
        {"recon": torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64),
         "mu": torch.randn(1, 4, latent_channels(2), generator=g, dtype=torch.float64),
         "log_sigma": 0.3 * torch.randn(1, 4, latent_channels(2), generator=g, dtype=torch.float64)},
        eps=eps,
    )

    block = TSBlock(dim, heads=2).double()
    series = torch.randn(1, 4, 3, dim, generator=g, dtype=torch.float64)
    w_block = _projection((1, 4, 3, dim), g)
    results["ts_block"] = grad_check(functional_loss(block, lambda m: (m(series) * w_block).sum()),
                                     module_params(block), eps=eps)
    return results


def grad_check_table(results: Dict[str, GradCheckResult], tolerance: float = GRADCHECK_TOLERANCE) -> pd.DataFrame:
    rows = [{"layer": name, "max_rel_error": r.max_rel_error, "worst_param": r.worst_param,
             "passed": r.max_rel_error < tolerance} for name, r in results.items()]
    return pd.DataFrame(rows, columns=GRADCHECK_COLUMNS)


# ---------------------------------------------------------------------------
# forecaster ablations

def _final_loss(log_path: Path, tail: int = 5) -> float:
    """Mean centre loss over the last `tail` logged steps."""
    log = pd.read_csv(log_path)
    return float(log["center_loss"].tail(tail).mean())


def _pair_archive_starts(hour_range: Tuple[int, int], time_window: int) -> Tuple[List[int], List[int]]:
    starts = training_pairs(hour_range, time_window)
    return starts, sorted(set(starts) | {s + time_window for s in starts})


def init_ablation(cfg: RunConfig, manifest: Manifest, data_dir: Union[str, Path], ckpt_dir: Union[str, Path],
                  seeds: Sequence[int], out_dir: Union[str, Path], steps: Optional[int] = None) -> pd.DataFrame:
    """
    Train the forecaster from raw zero-filled latents and from assimilated
    windows with the same seeds; report the final training loss of each and
    the assimilated-to-raw ratio.
    """
    out_dir = Path(out_dir)
    pipeline = Pipeline.load(ckpt_dir, with_aiwp=False)
    spec, T = manifest.grid, manifest.time_window
    encoded = encode_dataset(pipeline.vaes, data_dir, manifest.train_hours, spec, jobs=cfg.jobs)
    starts, archive_starts = _pair_archive_starts(manifest.train_hours, T)
    latent_dims = {m: pipeline.aida.model.latent_dims[m] for m in pipeline.modalities}
    optim = cfg.aiwp.optim if steps is None else cfg.aiwp.optim.model_copy(update={"total_steps": steps})
    rows = []
    for mode in ("raw", "aida"):
        archive = token_archive(pipeline.aida, encoded, archive_starts, spec, cfg.tokens_side, init_mode=mode)
        aiwp_cfg = cfg.aiwp.model_copy(update={"init_mode": mode, "optim": optim})
        for seed in seeds:
            log_path = out_dir / f"train_aiwp_{mode}_seed{seed}.csv"
            train_aiwp(archive, starts, latent_dims, spec, cfg.tokens_side, T, aiwp_cfg, seed, log_path=log_path)
            rows.append({"seed": seed, "init_mode": mode, "final_loss": _final_loss(log_path)})
    frame = pd.DataFrame(rows)
    raw = frame[frame["init_mode"] == "raw"].set_index("seed")["final_loss"]
    frame["ratio_to_raw"] = [r["final_loss"] / raw[r["seed"]] for _, r in frame.iterrows()]
    save_to_csv(frame, out_dir / "ablation_init.csv", columns=INIT_COLUMNS)
    return frame


def normalized_seam(fields: Dict[str, GriddedField], pipeline: Pipeline, spec: GridSpec) -> float:
    """Seam metric averaged over modalities, each normalised with its VAE statistics."""
    values = [seam_metric(normalize(field, pipeline.vaes[m].stats).data, spec) for m, field in fields.items()]
    return float(np.mean(values))


def cbc_ablation(cfg: RunConfig, manifest: Manifest, data_dir: Union[str, Path], ckpt_dir: Union[str, Path],
                 seeds: Sequence[int], out_dir: Union[str, Path], rollout_steps: int = 2,
                 steps: Optional[int] = None) -> pd.DataFrame:
    """
    Train with and without neighbour conditioning; report held-out centre
    latent MSE and the seam metric of a decoded rollout from the first test
    window.
    """
    out_dir = Path(out_dir)
    base = Pipeline.load(ckpt_dir, with_aiwp=False)
    spec, T = manifest.grid, manifest.time_window
    train_enc = encode_dataset(base.vaes, data_dir, manifest.train_hours, spec, jobs=cfg.jobs)
    test_enc = encode_dataset(base.vaes, data_dir, manifest.test_hours, spec, jobs=cfg.jobs)
    train_starts, train_archive_starts = _pair_archive_starts(manifest.train_hours, T)
    test_starts, test_archive_starts = _pair_archive_starts(manifest.test_hours, T)
    test_starts = test_starts[::T]
    test_archive_starts = sorted(set(test_starts) | {s + T for s in test_starts})
    latent_dims = {m: base.aida.model.latent_dims[m] for m in base.modalities}
    train_archive = token_archive(base.aida, train_enc, train_archive_starts, spec, cfg.tokens_side)
    test_archive = token_archive(base.aida, test_enc, test_archive_starts, spec, cfg.tokens_side)
    init_start = manifest.test_hours[0]
    initial = {m: load_modality(data_dir, m, range(init_start, init_start + T), jobs=cfg.jobs) for m in base.modalities}
    imputed = base.assimilate(initial, spec, decode=False)
    optim = cfg.aiwp.optim if steps is None else cfg.aiwp.optim.model_copy(update={"total_steps": steps})
    rows = []
    for seed in seeds:
        for cbc in (True, False):
            aiwp_cfg = cfg.aiwp.model_copy(update={"cbc": cbc, "optim": optim})
            tag = "cbc" if cbc else "nocbc"
            bundle = train_aiwp(train_archive, train_starts, latent_dims, spec, cfg.tokens_side, T, aiwp_cfg, seed,
                                log_path=out_dir / f"train_aiwp_{tag}_seed{seed}.csv")
            scores = evaluate_aiwp(bundle, test_archive, test_starts, spec)
            pipeline = Pipeline(base.vaes, base.aida, bundle)
            result = pipeline.forecast(imputed, spec, rollout_steps, decode_steps=range(1, rollout_steps + 1))
            seam = float(np.mean([normalized_seam(result.fields[s], pipeline, spec) for s in sorted(result.fields)]))
            rows.append({"seed": seed, "cbc": cbc, "center_mse": scores["center_mse"], "seam": seam})
            logger.info(f"CBC ablation seed {seed} cbc={cbc}: centre MSE {scores['center_mse']:.6f}, seam {seam:.6f}")
    frame = pd.DataFrame(rows, columns=CBC_COLUMNS)
    save_to_csv(frame, out_dir / "ablation_cbc.csv", columns=CBC_COLUMNS)
    return frame


def persistence_comparison(pipeline: Pipeline, manifest: Manifest, data_dir: Union[str, Path],
                           out_dir: Union[str, Path], steps: int = 2, jobs: int = 1,
                           max_inits: Optional[int] = None) -> Tuple[pd.DataFrame, Optional[int]]:
    """
    Forecast MAE against persistence of the assimilated initial window, per
    lead hour, averaged over channels, modalities and every init window of
    the test period. Returns the table and the crossover lead.
    """
    spec, T = manifest.grid, manifest.time_window
    inits = window_starts(manifest.test_hours, T * (steps + 1), T)
    if max_inits is not None:
        inits = inits[:max_inits]
    if not inits:
        raise ArgumentError(f"test period {manifest.test_hours} holds no {steps}-step forecast")
    model_rows, persist_rows = [], []
    for start in inits:
        initial = {m: load_modality(data_dir, m, range(start, start + T), jobs=jobs) for m in pipeline.modalities}
        imputed = pipeline.assimilate(initial, spec, decode=True)
        forecast = pipeline.forecast(imputed, spec, steps, decode_steps=range(1, steps + 1))
        hours = [h for step_hours in forecast.timestamps for h in step_hours]
        issue_hour = start + T - 1
        for m in pipeline.modalities:
            obs = load_modality(data_dir, m, hours, jobs=jobs)
            pred = GriddedField(modality=m, data=np.concatenate([forecast.fields[s][m].data for s in sorted(forecast.fields)]),
                                timestamps=hours)
            model_rows.extend(mae_rows(pred, obs, issue_hour))
            persist_rows.extend(mae_rows(persistence_forecast(imputed.fields[m], hours), obs, issue_hour))
    model = pd.DataFrame(model_rows, columns=MAE_COLUMNS).groupby("lead_h")["value"].mean()
    persist = pd.DataFrame(persist_rows, columns=MAE_COLUMNS).groupby("lead_h")["value"].mean()
    frame = pd.DataFrame({"lead_h": model.index, "model_mae": model.values, "persistence_mae": persist.reindex(model.index).values})
    crossover = persistence_crossover(model_rows, persist_rows)
    save_to_csv(frame, Path(out_dir) / "persistence.csv", columns=PERSISTENCE_COLUMNS)
    logger.info(f"Persistence crossover lead: {crossover if crossover is not None else 'none'}")
    return frame, crossover
