"""
Command line entry point: `python -m src.cli <subcommand> [options]`.

Every subcommand resolves the run config (preset, config file, --set
overrides), writes its artifacts plus the resolved config, and exits 0. On
failure one line `error: <ClassName>: <message>` goes to stderr and the exit
code follows the error class.
"""
from typing import Dict, List, Optional, Sequence, Tuple
from pathlib import Path
import argparse
import logging
import sys

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.aida import evaluate_aida, train_aida
from src.aiwp import evaluate_aiwp, token_archive, train_aiwp, training_pairs
from src.config import RunConfig, load_config, resolve_seed, save_resolved_config
from src.data_processing import (
    Manifest,
    load_modality,
    load_truth,
    read_manifest,
    split_hours,
    validate_dataset,
    write_manifest,
)
from src.exceptions import ArgumentError, ConfigError, ContractError, DawpError, FormatError, NumericError
from src.experiments import cbc_ablation, grad_check_table, init_ablation, layer_grad_checks, persistence_comparison
from src.mvae import compression_ratio, latent_channels, reconstruction_mae, train_vae
from src.obsio import GriddedField, merge_time, read_grid, read_swath, remap_with_counts, write_grid
from src.pipeline import (
    AIDA_CKPT,
    AIWP_CKPT,
    PRECIP_CKPT,
    Pipeline,
    completed_tokens,
    encode_dataset,
    forecast_token_files,
    load_vaes,
    load_window,
    read_tokens,
    save_tokens,
    tokens_checkpoint,
    vae_checkpoint,
)
from src.precipmap import PrecipBundle, log_space_mae, map_precip, train_precip_head
from src.synthgen import gen_dataset, hash_seed
from src.utils import configure_logging, save_to_csv
from src.verify import (
    CSI_COLUMNS,
    MAE_COLUMNS,
    SEAM_COLUMNS,
    ablate_modalities,
    csi_far_rows,
    lead_window_means,
    line_chart,
    mae_rows,
    persistence_forecast,
    seam_metric,
    write_pgm,
    write_ppm,
)

logger = logging.getLogger(__name__)

ABLATION_MODES = ("drop-one", "keep-one", "aida-init", "cbc", "persistence")


class CliParser(argparse.ArgumentParser):
    """Usage errors become ArgumentError so they share the one-line error format."""

    def error(self, message: str) -> None:
        raise ArgumentError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", type=str, default=None, help="Named preset in data/presets (desk, paper)")
    common.add_argument("--config", type=str, default=None, help="key=value config file, may start with preset=<name>")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key; repeatable")
    common.add_argument("--seed", type=int, default=None, help="Run seed (falls back to the config, then DAWP_SEED)")
    common.add_argument("--jobs", type=int, default=None, help="Worker threads for data generation and loading")
    common.add_argument("--log-level", type=str, default=None, help="Logging level (default DAWP_LOG_LEVEL or INFO)")
    return common


def _setup(args: argparse.Namespace) -> Tuple[RunConfig, int]:
    cfg = load_config(args.preset, args.config, args.overrides)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ArgumentError("--jobs must be at least 1")
        cfg = cfg.model_copy(update={"jobs": args.jobs})
    return cfg, resolve_seed(cfg, args.seed)


def _manifest(cfg: RunConfig, data_dir: str) -> Manifest:
    manifest = read_manifest(data_dir)
    if manifest.grid != cfg.grid:
        raise ConfigError(f"dataset grid {manifest.grid} differs from config grid {cfg.grid}")
    if manifest.time_window != cfg.time_window:
        raise ConfigError(f"dataset time_window {manifest.time_window} differs from config {cfg.time_window}")
    return manifest


# ---------------------------------------------------------------------------
# data

def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    out = Path(args.out)
    spec = cfg.grid
    gen_dataset(cfg.modalities, cfg.field.model_copy(update={"seed": seed}), spec, cfg.data.hours, out, seed,
                jobs=cfg.jobs, write_swaths=cfg.data.write_swaths,
                precip=cfg.precip.truth if cfg.data.with_precip else None)
    train_hours, test_hours = split_hours(cfg.data.hours, cfg.data.train_fraction)
    write_manifest(Manifest(grid=spec, modalities={m: mod.channels for m, mod in cfg.modalities.items()},
                            hours=cfg.data.hours, train_hours=train_hours, test_hours=test_hours,
                            time_window=cfg.time_window, with_precip=cfg.data.with_precip, seed=seed), out)
    save_resolved_config(cfg, out, seed)
    if not validate_dataset(out):
        raise ContractError(f"generated dataset in {out} failed validation")
    return 0


def cmd_remap(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    swath = read_swath(args.swath)
    field, counts = remap_with_counts(swath, cfg.grid, jobs=cfg.jobs)
    write_grid(field, args.out)
    covered = float((counts[0] > 0).mean())
    logger.info(f"Remapped {swath.n_points} points of {swath.modality}: {covered:.3f} of cells observed")
    save_resolved_config(cfg, Path(args.out).parent, seed)
    return 0


# ---------------------------------------------------------------------------
# training

def cmd_train_vae(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    manifest = _manifest(cfg, args.data)
    out = Path(args.out)
    modalities = args.modality or list(manifest.modalities)
    rows = []
    for index, m in enumerate(manifest.modalities):
        if m not in modalities:
            continue
        field = load_modality(args.data, m, range(*manifest.train_hours), jobs=cfg.jobs)
        bundle = train_vae(field, manifest.grid.tile, cfg.vae, seed=hash_seed(seed, index),
                           log_path=out / f"train_vae_{m}.csv")
        bundle.save(vae_checkpoint(out, m))
        test = load_modality(args.data, m, range(*manifest.test_hours), jobs=cfg.jobs)
        rows.append({"modality": m, "recon_mae": reconstruction_mae(bundle, test),
                     "compression_ratio": compression_ratio(manifest.grid.tile, cfg.vae.patch, field.channels)})
        logger.info(f"VAE {m}: held-out reconstruction MAE {rows[-1]['recon_mae']:.6f}")
    save_to_csv(rows, out / "vae_eval.csv", columns=["modality", "recon_mae", "compression_ratio"])
    save_resolved_config(cfg, out, seed)
    return 0


def cmd_train_aida(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    manifest = _manifest(cfg, args.data)
    ckpt = Path(args.ckpt)
    spec = manifest.grid
    vaes = load_vaes(ckpt, list(manifest.modalities))
    encoded = encode_dataset(vaes, args.data, manifest.train_hours, spec, jobs=cfg.jobs)
    latent_dims = {m: latent_channels(c) for m, c in manifest.modalities.items()}
    num_tokens = next(iter(vaes.values())).model.num_tokens
    bundle = train_aida(encoded, latent_dims, num_tokens, manifest.train_hours, manifest.time_window, cfg.aida, seed,
                        log_path=ckpt / "train_aida.csv")
    bundle.save(ckpt / AIDA_CKPT)
    test = encode_dataset(vaes, args.data, manifest.test_hours, spec, jobs=cfg.jobs)
    scores = evaluate_aida(bundle, test, manifest.test_hours, seed, stride=manifest.time_window)
    logger.info(f"AIDA held-out target MSE {scores['target_mse']:.6f} (target variance {scores['target_variance']:.6f})")
    save_to_csv([scores], ckpt / "aida_eval.csv", columns=["target_mse", "target_variance"])
    save_resolved_config(cfg, ckpt, seed)
    return 0


def cmd_train_aiwp(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    manifest = _manifest(cfg, args.data)
    ckpt = Path(args.ckpt)
    spec, T = manifest.grid, manifest.time_window
    updates = {}
    if args.init_mode:
        updates["init_mode"] = args.init_mode
    if args.no_cbc:
        updates["cbc"] = False
    aiwp_cfg = cfg.aiwp.model_copy(update=updates)
    pipeline = Pipeline.load(ckpt, with_aiwp=False)
    latent_dims = dict(pipeline.aida.model.latent_dims)

    encoded = encode_dataset(pipeline.vaes, args.data, manifest.train_hours, spec, jobs=cfg.jobs)
    starts = training_pairs(manifest.train_hours, T)
    archive = token_archive(pipeline.aida, encoded, sorted(set(starts) | {s + T for s in starts}), spec,
                            cfg.tokens_side, init_mode=aiwp_cfg.init_mode)
    bundle = train_aiwp(archive, starts, latent_dims, spec, cfg.tokens_side, T, aiwp_cfg, seed,
                        log_path=ckpt / "train_aiwp.csv")
    bundle.save(ckpt / AIWP_CKPT)

    test = encode_dataset(pipeline.vaes, args.data, manifest.test_hours, spec, jobs=cfg.jobs)
    test_starts = training_pairs(manifest.test_hours, T)[::T]
    test_archive = token_archive(pipeline.aida, test, sorted(set(test_starts) | {s + T for s in test_starts}), spec,
                                 cfg.tokens_side, init_mode=aiwp_cfg.init_mode)
    scores = evaluate_aiwp(bundle, test_archive, test_starts, spec)
    logger.info(f"AIWP held-out centre MSE {scores['center_mse']:.6f} (latent persistence {scores['persistence_mse']:.6f})")
    save_to_csv([scores], ckpt / "aiwp_eval.csv", columns=["center_mse", "persistence_mse"])
    save_resolved_config(cfg, ckpt, seed)
    return 0


def cmd_train_precip(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    manifest = _manifest(cfg, args.data)
    if not manifest.with_precip:
        raise ContractError(f"dataset {args.data} has no precipitation truth")
    ckpt = Path(args.ckpt)
    spec = manifest.grid
    m = cfg.precip.modality
    pipeline = Pipeline.load(ckpt, with_aiwp=False)

    def pairs(hour_range: Tuple[int, int]):
        encoded = encode_dataset(pipeline.vaes, args.data, hour_range, spec, jobs=cfg.jobs)
        tokens, hours = completed_tokens(pipeline.aida, encoded, hour_range, spec, cfg.tokens_side)
        raw = load_modality(args.data, m, hours, jobs=cfg.jobs)
        return tokens[m], load_truth(args.data, "precip", hours), ~np.isnan(raw.data[:, 0])

    tokens, targets, observed = pairs(manifest.train_hours)
    bundle = train_precip_head(tokens, targets, observed, spec, cfg.vae.patch, cfg.precip, seed,
                               log_path=ckpt / "train_precip.csv")
    bundle.save(ckpt / PRECIP_CKPT)
    tokens, targets, observed = pairs(manifest.test_hours)
    mae = log_space_mae(bundle, tokens, targets, observed)
    logger.info(f"Precip head held-out log-space MAE {mae:.6f}")
    save_to_csv([{"modality": m, "log_space_mae": mae}], ckpt / "precip_eval.csv")
    save_resolved_config(cfg, ckpt, seed)
    return 0


# ---------------------------------------------------------------------------
# inference

def cmd_assimilate(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    manifest = _manifest(cfg, args.data)
    out = Path(args.out)
    pipeline = Pipeline.load(args.ckpt, with_aiwp=False)
    fields = load_window(args.data, pipeline.modalities, args.start, manifest.time_window, jobs=cfg.jobs)
    imputed = pipeline.assimilate(fields, manifest.grid, decode=True)
    for m, field in imputed.fields.items():
        write_grid(field, out / f"imputed_{m}.grd")
    save_tokens(imputed.tokens, imputed.timestamps, tokens_checkpoint(out, 0))
    save_resolved_config(cfg, out, seed)
    return 0


def cmd_forecast(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    manifest = _manifest(cfg, args.data)
    if args.steps < 1:
        raise ArgumentError("--steps must be at least 1")
    out = Path(args.out)
    spec = manifest.grid
    pipeline = Pipeline.load(args.ckpt)
    fields = load_window(args.data, pipeline.modalities, args.init, manifest.time_window, jobs=cfg.jobs)
    imputed = pipeline.assimilate(fields, spec, decode=True)
    for m, field in imputed.fields.items():
        write_grid(field, out / f"init_{m}.grd")
    decode_steps = args.decode_steps if args.decode_steps is not None else range(1, args.steps + 1)
    result = pipeline.forecast(imputed, spec, args.steps, decode_steps=decode_steps,
                               cbc=False if args.no_cbc else None)
    for k, (tokens, hours) in enumerate(zip(result.tokens, result.timestamps), start=1):
        save_tokens(tokens, hours, tokens_checkpoint(out, k))
    rows = []
    for step in sorted(result.fields):
        for m, field in result.fields[step].items():
            rows.append({"step": step, "modality": m, "mean": float(np.mean(field.data)),
                         "std": float(np.std(field.data)), "nan_count": int(np.isnan(field.data).sum())})
    if result.fields:
        for m in pipeline.modalities:
            write_grid(merge_time([result.fields[s][m] for s in sorted(result.fields)]), out / f"forecast_{m}.grd")
    save_to_csv(rows, out / "stats.csv", columns=["step", "modality", "mean", "std", "nan_count"])
    save_resolved_config(cfg, out, seed)
    return 0


def cmd_precip(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    pred = Path(args.pred)
    bundle = PrecipBundle.load(Path(args.ckpt) / PRECIP_CKPT)
    files = [p for p in forecast_token_files(pred) if p.stem != "tokens_step0"]
    if not files:
        raise ContractError(f"no forecast token files in {pred}")
    fields = []
    for path in files:
        tokens, hours = read_tokens(path)
        if bundle.cfg.modality not in tokens:
            raise ContractError(f"{path} holds no {bundle.cfg.modality} tokens")
        fields.append(map_precip(tokens[bundle.cfg.modality], bundle, hours))
    write_grid(merge_time(fields), pred / "forecast_precip.grd")
    save_resolved_config(cfg, pred, seed)
    return 0


# ---------------------------------------------------------------------------
# verification

def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    manifest = read_manifest(args.truth)
    pred_dir, out = Path(args.pred), Path(args.csv)
    width = manifest.time_window
    model_rows, persist_rows, seam_rows = [], [], []
    forecasts: Dict[str, GriddedField] = {}
    for m in manifest.modalities:
        path = pred_dir / f"forecast_{m}.grd"
        if not path.exists():
            continue
        pred = read_grid(path)
        forecasts[m] = pred
        obs = load_modality(args.truth, m, pred.timestamps, jobs=cfg.jobs)
        issue_hour = pred.timestamps[0] - 1
        model_rows.extend(mae_rows(pred, obs, issue_hour))
        init_path = pred_dir / f"init_{m}.grd"
        if init_path.exists():
            persist_rows.extend(mae_rows(persistence_forecast(read_grid(init_path), pred.timestamps), obs, issue_hour))
        seam_rows.append({"modality": m, "seam": seam_metric(pred.data, manifest.grid)})
        write_ppm(pred.data[-1, 0], out / f"forecast_{m}_last.ppm")
        write_pgm(obs.data[-1, 0], out / f"obs_{m}_last.pgm")
    if not forecasts:
        raise ContractError(f"no forecast_<modality>.grd in {pred_dir}")

    save_to_csv(model_rows, out / "mae_by_lead.csv", columns=MAE_COLUMNS)
    save_to_csv(lead_window_means(model_rows, width), out / "mae_by_window.csv")
    series = {"model": _lead_curve(model_rows)}
    if persist_rows:
        save_to_csv(persist_rows, out / "mae_by_lead_persistence.csv", columns=MAE_COLUMNS)
        series["persistence"] = _lead_curve(persist_rows)
    line_chart(series, out / "mae_by_lead.ppm", title="MAE by lead")
    save_to_csv(seam_rows, out / "seam.csv", columns=SEAM_COLUMNS)

    csi_rows = []
    precip_path = pred_dir / "forecast_precip.grd"
    if precip_path.exists() and manifest.with_precip:
        pred = read_grid(precip_path)
        truth = load_truth(args.truth, "precip", pred.timestamps)
        issue_hour = pred.timestamps[0] - 1
        csi_rows += csi_far_rows(pred, truth, issue_hour, "sp", 0, cfg.precip.sp_thresholds, width)
        csi_rows += csi_far_rows(pred, truth, issue_hour, "tcwv", 1, cfg.precip.tcwv_thresholds, width)
        write_ppm(pred.data[-1, 0], out / "forecast_sp_last.ppm", cmap="Blues")
    save_to_csv(csi_rows, out / "csi_far.csv", columns=CSI_COLUMNS)
    save_resolved_config(cfg, out, seed)
    return 0


def _lead_curve(rows: List[Dict]) -> Tuple[List[int], List[float]]:
    curve = pd.DataFrame(rows, columns=MAE_COLUMNS).groupby("lead_h")["value"].mean()
    return [int(h) for h in curve.index], [float(v) for v in curve.values]


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    manifest = _manifest(cfg, args.data)
    out = Path(args.out)
    spec, T = manifest.grid, manifest.time_window
    seeds = args.seeds or [seed]
    if args.mode in ("drop-one", "keep-one"):
        pipeline = Pipeline.load(args.ckpt)
        init = manifest.test_hours[0] if args.init is None else args.init
        inputs = load_window(args.data, pipeline.modalities, init, T, jobs=cfg.jobs)
        hours = range(init + T, init + T + args.steps * T)
        obs = {m: load_modality(args.data, m, hours, jobs=cfg.jobs) for m in pipeline.modalities}
        frame = ablate_modalities(args.mode, inputs, lambda fields: pipeline.forecast_fields(fields, spec, args.steps),
                                  obs, issue_hour=init + T - 1, width=T)
        save_to_csv(frame, out / "ablation.csv")
    elif args.mode == "aida-init":
        init_ablation(cfg, manifest, args.data, args.ckpt, seeds, out, steps=args.train_steps)
    elif args.mode == "cbc":
        cbc_ablation(cfg, manifest, args.data, args.ckpt, seeds, out, rollout_steps=args.steps, steps=args.train_steps)
    else:
        pipeline = Pipeline.load(args.ckpt)
        persistence_comparison(pipeline, manifest, args.data, out, steps=args.steps, jobs=cfg.jobs,
                               max_inits=args.max_inits)
    save_resolved_config(cfg, out, seed)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg, seed = _setup(args)
    results = layer_grad_checks(dim=args.dim, seed=seed)
    if not args.all:
        unknown = [name for name in args.layer if name not in results]
        if not args.layer or unknown:
            raise ArgumentError(f"choose --all or --layer from {', '.join(results)}")
        results = {name: results[name] for name in args.layer}
    table = grad_check_table(results)
    print(table.to_string(index=False))
    if args.csv:
        save_to_csv(table, args.csv)
    failed = table.loc[~table["passed"], "layer"].tolist()
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    common = _common_options()
    parser = CliParser(prog="python -m src.cli", description="Observation-space assimilation and tiled forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Write a synthetic multi-sensor dataset")
    p.add_argument("--out", required=True, help="Dataset directory")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("remap", parents=[common], help="Remap one swath file onto the grid")
    p.add_argument("--swath", required=True, help="Input .swt file")
    p.add_argument("--out", required=True, help="Output .grd file")
    p.set_defaults(handler=cmd_remap)

    p = sub.add_parser("train-vae", parents=[common], help="Train one masked VAE per modality")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="Checkpoint directory")
    p.add_argument("--modality", action="append", default=None, help="Restrict to these modalities; repeatable")
    p.set_defaults(handler=cmd_train_vae)

    for name, handler, text in (("train-aida", cmd_train_aida, "Train the assimilation MAE on frozen VAE latents"),
                                ("train-precip", cmd_train_precip, "Train the precipitation head")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", required=True, help="Checkpoint directory (read and written)")
        p.set_defaults(handler=handler)

    p = sub.add_parser("train-aiwp", parents=[common], help="Train the tiled forecaster")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="Checkpoint directory (read and written)")
    p.add_argument("--init-mode", choices=["aida", "raw"], default=None)
    p.add_argument("--no-cbc", action="store_true", help="Replicate the centre tile instead of its neighbours")
    p.set_defaults(handler=cmd_train_aiwp)

    p = sub.add_parser("assimilate", parents=[common], help="Complete one observation window")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--start", type=int, required=True, help="First hour of the window")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_assimilate)

    p = sub.add_parser("forecast", parents=[common], help="Assimilate a window and roll the forecaster out")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--init", type=int, required=True, help="First hour of the initial window")
    p.add_argument("--steps", type=int, default=3, help="Forecast windows")
    p.add_argument("--decode-steps", type=_int_list, default=None, help="Steps to decode, e.g. 1,3 (default all)")
    p.add_argument("--no-cbc", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_forecast)

    p = sub.add_parser("precip", parents=[common], help="Map forecast tokens to precipitation")
    p.add_argument("--pred", required=True, help="Forecast directory holding tokens_step<k>.ckpt")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(handler=cmd_precip)

    p = sub.add_parser("evaluate", parents=[common], help="Verify a forecast against raw observations")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True, help="Dataset directory")
    p.add_argument("--csv", required=True, help="Metrics directory")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="Modality, initialisation, CBC or persistence ablation")
    p.add_argument("--mode", choices=ABLATION_MODES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", type=int, default=None, help="Initial window start (default: first test hour)")
    p.add_argument("--steps", type=int, default=2, help="Forecast windows")
    p.add_argument("--seeds", type=_int_list, default=None, help="Training seeds, e.g. 0,1,2")
    p.add_argument("--train-steps", type=int, default=None, help="Override forecaster training steps")
    p.add_argument("--max-inits", type=int, default=None, help="Cap the persistence comparison's init windows")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="Central-difference gradient checks")
    p.add_argument("--all", action="store_true")
    p.add_argument("--layer", action="append", default=[])
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--csv", default=None)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        return args.handler(args)
    except ValidationError as e:
        print(f"error: ConfigError: {' '.join(str(e).split())}", file=sys.stderr)
        return ConfigError.exit_code
    except DawpError as e:
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
