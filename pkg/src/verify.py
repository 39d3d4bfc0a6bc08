"""
Forecast verification: pointwise MAE over observed cells, CSI/FAR, the
persistence baseline, the tile-seam metric, the modality ablation runner,
and PGM/PPM renderings.
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
from pathlib import Path
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from pydantic import BaseModel, model_validator

from src.exceptions import ArgumentError, ContractError
from src.grid import GridSpec
from src.obsio import GriddedField

logger = logging.getLogger(__name__)

MAE_COLUMNS = ["lead_h", "modality", "channel", "value"]
CSI_COLUMNS = ["variable", "tau", "lead_window", "csi", "far"]
ABLATION_COLUMNS = ["mode", "manipulated", "evaluated", "lead_window", "mae", "ratio"]
SEAM_COLUMNS = ["modality", "seam"]


class ConfusionCounts(BaseModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @model_validator(mode="after")
    def _check(self) -> "ConfusionCounts":
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")
        return self

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(tp=self.tp + other.tp, fp=self.fp + other.fp,
                               fn=self.fn + other.fn, tn=self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(field: np.ndarray, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """(events, valid): an event is a non-NaN value >= tau; NaN cells are not valid."""
    field = np.asarray(field)
    valid = ~np.isnan(field)
    return valid & (np.nan_to_num(field, nan=-np.inf) >= tau), valid


def confusion(pred: np.ndarray, truth: np.ndarray, tau: float) -> ConfusionCounts:
    p, p_valid = binarize(pred, tau)
    t, t_valid = binarize(truth, tau)
    both = p_valid & t_valid
    return ConfusionCounts(
        tp=int((p & t & both).sum()),
        fp=int((p & ~t & both).sum()),
        fn=int((~p & t & both).sum()),
        tn=int((~p & ~t & both).sum()),
    )


def csi(counts: ConfusionCounts) -> Optional[float]:
    """TP / (TP + FN + FP); None when no event was forecast or observed."""
    denom = counts.tp + counts.fn + counts.fp
    return counts.tp / denom if denom else None


def far(counts: ConfusionCounts) -> Optional[float]:
    """FP / (FP + TP); None when no event was forecast."""
    denom = counts.fp + counts.tp
    return counts.fp / denom if denom else None


# ---------------------------------------------------------------------------
# MAE

def pointwise_mae(pred: GriddedField, obs: GriddedField) -> np.ndarray:
    """
    [T, C] mean |pred - obs| over cells where obs is present, NaN where a
    lead has no observed cell. Sums run sequentially in row-major order in
    float64.
    """
    if pred.data.shape != obs.data.shape:
        raise ArgumentError(f"pred {pred.data.shape} vs obs {obs.data.shape}")
    if pred.timestamps != obs.timestamps:
        raise ArgumentError("pred and obs cover different hours")
    T, C = pred.data.shape[:2]
    out = np.full((T, C), np.nan, dtype=np.float64)
    for t in range(T):
        for k in range(C):
            o = obs.data[t, k].reshape(-1)
            p = pred.data[t, k].reshape(-1)
            seen = ~np.isnan(o)
            if not seen.any():
                continue
            if np.isnan(p[seen]).any():
                raise ContractError(f"{pred.modality}: NaN forecast at an observed cell (hour {pred.timestamps[t]}, channel {k})")
            diffs = np.abs(p[seen].astype(np.float64) - o[seen].astype(np.float64))
            out[t, k] = float(np.cumsum(diffs)[-1]) / int(seen.sum())
    return out


def mae_rows(pred: GriddedField, obs: GriddedField, issue_hour: int) -> List[Dict]:
    mae = pointwise_mae(pred, obs)
    rows = []
    for t, hour in enumerate(pred.timestamps):
        for k in range(mae.shape[1]):
            rows.append({"lead_h": hour - issue_hour, "modality": pred.modality, "channel": k, "value": mae[t, k]})
    return rows


def lead_window(lead_h: int, width: int) -> str:
    """Leads 1..width fall in '0-{width}h', the next width leads in the next window, and so on."""
    lo = ((lead_h - 1) // width) * width
    return f"{lo}-{lo + width}h"


def lead_window_means(rows: Union[pd.DataFrame, List[Dict]], width: int) -> pd.DataFrame:
    """Time-mean of per-hour values within each lead window; absent hours are skipped."""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows, columns=MAE_COLUMNS)
    frame = frame.assign(lead_window=[lead_window(int(h), width) for h in frame["lead_h"]],
                         window_start=[(int(h) - 1) // width for h in frame["lead_h"]])
    means = frame.groupby(["window_start", "lead_window", "modality", "channel"], as_index=False)["value"].mean()
    return means.drop(columns="window_start")


def persistence_forecast(last_window: GriddedField, timestamps: Sequence[int]) -> GriddedField:
    """Every forecast hour equals the final frame of the (assimilated) initial window."""
    last = last_window.data[-1:]
    data = np.repeat(last, len(timestamps), axis=0)
    return GriddedField(modality=last_window.modality, data=data, timestamps=list(timestamps))


def persistence_crossover(model_rows: List[Dict], persistence_rows: List[Dict]) -> Optional[int]:
    """First lead hour at which the model's mean MAE is no longer below persistence; None if it never is."""
    model = pd.DataFrame(model_rows, columns=MAE_COLUMNS).groupby("lead_h")["value"].mean()
    persist = pd.DataFrame(persistence_rows, columns=MAE_COLUMNS).groupby("lead_h")["value"].mean()
    for lead in sorted(set(model.index) & set(persist.index)):
        if not np.isnan(model[lead]) and not np.isnan(persist[lead]) and model[lead] >= persist[lead]:
            return int(lead)
    return None


# ---------------------------------------------------------------------------
# CSI / FAR

def csi_far_rows(pred: GriddedField, truth: GriddedField, issue_hour: int, variable: str, channel: int,
                 thresholds: Sequence[float], width: int) -> List[Dict]:
    """Counts pooled over the hours of each lead window, then CSI and FAR per (threshold, window)."""
    if pred.timestamps != truth.timestamps:
        raise ArgumentError("pred and truth cover different hours")
    rows = []
    for tau in thresholds:
        pooled: Dict[str, ConfusionCounts] = {}
        for t, hour in enumerate(pred.timestamps):
            label = lead_window(hour - issue_hour, width)
            counts = confusion(pred.data[t, channel], truth.data[t, channel], tau)
            pooled[label] = pooled.get(label, ConfusionCounts()) + counts
        for label, counts in pooled.items():
            rows.append({"variable": variable, "tau": tau, "lead_window": label,
                         "csi": csi(counts), "far": far(counts)})
    return rows


# ---------------------------------------------------------------------------
# seams

def seam_metric(field: np.ndarray, spec: GridSpec) -> float:
    """
    Mean |x(a) - x(b)| over cell pairs (a, b) adjacent across a tile
    boundary, including the longitude wrap between the last and first
    columns. `field` is [..., H, W] and must be dense.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.shape[-2:] != (spec.height, spec.width):
        raise ArgumentError(f"field {field.shape} does not match grid {spec.height}x{spec.width}")
    if np.isnan(field).any():
        raise ArgumentError("seam metric needs a dense field")
    cols = np.arange(spec.tiles_w) * spec.tile
    left = np.mod(cols - 1, spec.width)
    vertical = np.abs(field[..., :, cols] - field[..., :, left])
    rows = np.arange(1, spec.tiles_h) * spec.tile
    horizontal = np.abs(field[..., rows, :] - field[..., rows - 1, :])
    total = vertical.sum() + horizontal.sum()
    return float(total / (vertical.size + horizontal.size))


# ---------------------------------------------------------------------------
# ablations

ForecastFn = Callable[[Dict[str, GriddedField]], Dict[str, GriddedField]]


def blank(field: GriddedField) -> GriddedField:
    return GriddedField(modality=field.modality, data=np.full_like(field.data, np.nan), timestamps=list(field.timestamps))


def ablate_modalities(mode: str, inputs: Dict[str, GriddedField], forecast_fn: ForecastFn,
                      obs: Dict[str, GriddedField], issue_hour: int, width: int) -> pd.DataFrame:
    """
    Re-run the forecast with one modality removed (drop-one) or only one kept
    (keep-one) and report, per evaluated modality and lead window, the MAE
    and its ratio to the full-input forecast. Rows with manipulated = 'none'
    are the full input; keep-one also reports 'all' (every modality removed).
    """
    if mode not in ("drop-one", "keep-one"):
        raise ArgumentError(f"unknown ablation mode {mode!r}")
    modalities = list(inputs)

    def window_mae(forecast: Dict[str, GriddedField]) -> pd.DataFrame:
        rows = []
        for m in modalities:
            rows.extend(mae_rows(forecast[m], obs[m], issue_hour))
        means = lead_window_means(rows, width)
        return means.groupby(["lead_window", "modality"], as_index=False, sort=False)["value"].mean()

    variants: List[Tuple[str, Dict[str, GriddedField]]] = [("none", dict(inputs))]
    for m in modalities:
        if mode == "drop-one":
            variants.append((m, {k: (blank(f) if k == m else f) for k, f in inputs.items()}))
        else:
            variants.append((m, {k: (f if k == m else blank(f)) for k, f in inputs.items()}))
    if mode == "keep-one":
        variants.append(("all", {k: blank(f) for k, f in inputs.items()}))

    baseline = None
    rows = []
    for name, variant in variants:
        logger.info(f"Ablation {mode}: manipulated {name}")
        scores = window_mae(forecast_fn(variant))
        if baseline is None:
            baseline = scores.set_index(["lead_window", "modality"])["value"]
        for _, r in scores.iterrows():
            ref = baseline[(r["lead_window"], r["modality"])]
            rows.append({"mode": mode, "manipulated": name, "evaluated": r["modality"], "lead_window": r["lead_window"],
                         "mae": r["value"], "ratio": r["value"] / ref if ref > 0 else np.nan})
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


# ---------------------------------------------------------------------------
# rasters

def _write_pnm(path: Union[str, Path], magic: bytes, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = pixels.shape[:2]
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    logger.info(f"Image saved to: {path}")
    return path


def _scale_to_bytes(field: np.ndarray, vmin: Optional[float], vmax: Optional[float]) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    finite = field[np.isfinite(field)]
    lo = vmin if vmin is not None else (finite.min() if finite.size else 0.0)
    hi = vmax if vmax is not None else (finite.max() if finite.size else 1.0)
    scaled = (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)
    return np.clip(np.nan_to_num(scaled, nan=0.0), 0.0, 1.0)


def write_pgm(field: np.ndarray, path: Union[str, Path], vmin: Optional[float] = None,
              vmax: Optional[float] = None) -> Path:
    """Grayscale raster of a 2-d field; NaN renders black."""
    return _write_pnm(path, b"P5", np.round(_scale_to_bytes(field, vmin, vmax) * 255))


def write_ppm(field: np.ndarray, path: Union[str, Path], cmap: str = "viridis", vmin: Optional[float] = None,
              vmax: Optional[float] = None) -> Path:
    """Colour raster of a 2-d field through a matplotlib colormap; NaN renders black."""
    rgba = matplotlib.colormaps[cmap](_scale_to_bytes(field, vmin, vmax))
    rgb = np.round(rgba[..., :3] * 255)
    rgb[np.isnan(np.asarray(field, dtype=np.float64))] = 0
    return _write_pnm(path, b"P6", rgb)


def line_chart(series: Dict[str, Tuple[Sequence[float], Sequence[float]]], path: Union[str, Path],
               xlabel: str = "lead (h)", ylabel: str = "MAE", title: str = "") -> Path:
    """Render lead-time curves with matplotlib and store the canvas as a PPM."""
    fig, ax = plt.subplots(figsize=(6, 4), dpi=80)
    for name, (x, y) in series.items():
        ax.plot(list(x), list(y), marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.canvas.draw()
    rgb = np.asarray(fig.canvas.buffer_rgba())[..., :3]
    plt.close(fig)
    return _write_pnm(path, b"P6", rgb)
