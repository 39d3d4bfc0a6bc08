import numpy as np
import pandas as pd
import pytest

from src.aiwp import RolloutResult
from src.cli import main
from src.exceptions import ArgumentError, ContractError
from src.obsio import GriddedField, read_grid
from src.pipeline import (
    Pipeline,
    forecast_token_files,
    load_window,
    read_tokens,
    save_tokens,
    stitch_steps,
    tokens_checkpoint,
)

TINY = [
    "grid.height=24", "grid.width=48", "grid.tile=12", "time_window=2", "data.hours=24", "field.n_blobs=4",
    "vae.patch=4", "vae.dim=16", "vae.enc_depth=1", "vae.dec_depth=1", "vae.heads=2",
    "vae.optim.total_steps=2", "vae.optim.batch_size=4", "vae.optim.log_every=1",
    "aida.enc_dim=16", "aida.enc_depth=1", "aida.dec_dim=16", "aida.dec_depth=1", "aida.heads=2", "aida.keep=4",
    "aida.optim.total_steps=2", "aida.optim.batch_size=4", "aida.optim.log_every=1",
    "aiwp.dim=16", "aiwp.depth=1", "aiwp.heads=2",
    "aiwp.optim.total_steps=2", "aiwp.optim.batch_size=2", "aiwp.optim.log_every=1",
    "precip.dim=16", "precip.depth=1", "precip.heads=2",
    "precip.optim.total_steps=2", "precip.optim.batch_size=4", "precip.optim.log_every=1",
]


def options():
    args = ["--seed", "0"]
    for item in TINY:
        args += ["--set", item]
    return args


def test_tokens_file_roundtrip(tmp_path):
    tokens = {"amsua": np.ones((2, 4, 2, 12, 3, 3), dtype=np.float32),
              "mhs": np.zeros((2, 4, 2, 8, 3, 3), dtype=np.float32)}
    path = save_tokens(tokens, [5, 6], tokens_checkpoint(tmp_path, 1))
    back, hours = read_tokens(path)
    assert hours == [5, 6]
    assert list(back) == ["amsua", "mhs"]
    assert np.array_equal(back["amsua"], tokens["amsua"])


def test_forecast_token_files_sort_numerically(tmp_path):
    for step in (10, 2, 0, 1):
        save_tokens({"a": np.zeros(1, dtype=np.float32)}, [step], tokens_checkpoint(tmp_path, step))
    assert [p.stem for p in forecast_token_files(tmp_path)] == ["tokens_step0", "tokens_step1", "tokens_step2",
                                                                "tokens_step10"]


def test_stitch_steps():
    field = lambda hours: GriddedField(modality="a", data=np.full((2, 1, 2, 4), hours[0], dtype=np.float32),
                                       timestamps=hours)
    result = RolloutResult(tokens=[], timestamps=[], fields={2: {"a": field([3, 4])}, 1: {"a": field([1, 2])}})
    stitched = stitch_steps(result, ["a"])
    assert stitched["a"].timestamps == [1, 2, 3, 4]
    with pytest.raises(ArgumentError):
        stitch_steps(RolloutResult(tokens=[], timestamps=[], fields={}), ["a"])


def test_load_window_rejects_negative_start(tmp_path):
    with pytest.raises(ArgumentError):
        load_window(tmp_path, ["a"], -1, 2)


def test_pipeline_needs_checkpoints(tmp_path):
    with pytest.raises(ContractError):
        Pipeline.load(tmp_path)



def run_pipeline(root):
    data, ckpt, pred, metrics = (root / name for name in ("data", "ckpt", "pred", "metrics"))
    opts = options()
    commands = [
        ["gen-data", "--out", str(data)],
        ["train-vae", "--data", str(data), "--out", str(ckpt)],
        ["train-aida", "--data", str(data), "--ckpt", str(ckpt)],
        ["train-aiwp", "--data", str(data), "--ckpt", str(ckpt)],
        ["train-precip", "--data", str(data), "--ckpt", str(ckpt)],
        ["forecast", "--data", str(data), "--ckpt", str(ckpt), "--init", "19", "--steps", "1", "--out", str(pred)],
        ["precip", "--pred", str(pred), "--ckpt", str(ckpt)],
        ["evaluate", "--pred", str(pred), "--truth", str(data), "--csv", str(metrics)],
    ]
    for command in commands:
        assert main([*command, *opts]) == 0, f"{command[0]} failed"
    return data, ckpt, pred, metrics


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


@pytest.mark.integration
def test_end_to_end(pipeline_run):
    _, ckpt, pred, metrics = pipeline_run
    vae_eval = pd.read_csv(ckpt / "vae_eval.csv")
    assert set(vae_eval["modality"]) == {"amsua", "mhs"}
    assert (vae_eval["compression_ratio"] == 16.0).all()
    forecast = read_grid(pred / "forecast_amsua.grd")
    assert forecast.timestamps == [21, 22]
    assert not np.isnan(forecast.data).any()
    precip = read_grid(pred / "forecast_precip.grd")
    assert (precip.data >= 0).all()
    mae = pd.read_csv(metrics / "mae_by_lead.csv")
    assert set(mae["lead_h"]) == {1, 2}
    for name in ("csi_far.csv", "seam.csv", "mae_by_window.csv", "mae_by_lead.ppm"):
        assert (metrics / name).exists(), f"{name} missing"


@pytest.mark.integration
def test_rerun_reproduces_every_csv(pipeline_run, tmp_path):
    first = pipeline_run[0].parent
    run_pipeline(tmp_path)
    csvs = sorted(p.relative_to(first) for p in first.rglob("*.csv"))
    assert csvs, "The run wrote no CSV"
    for rel in csvs:
        assert (tmp_path / rel).read_bytes() == (first / rel).read_bytes(), f"{rel} differs between identical runs"


@pytest.mark.integration
@pytest.mark.parametrize("mode, extra, output", [
    ("drop-one", ["--steps", "1"], "ablation.csv"),
    ("keep-one", ["--steps", "1"], "ablation.csv"),
    ("aida-init", ["--train-steps", "2"], "ablation_init.csv"),
    ("cbc", ["--steps", "1", "--train-steps", "2"], "ablation_cbc.csv"),
    ("persistence", ["--steps", "1"], "persistence.csv"),
])
def test_ablation_modes(pipeline_run, tmp_path, mode, extra, output):
    data, ckpt, _, _ = pipeline_run
    assert main(["ablate", "--mode", mode, "--data", str(data), "--ckpt", str(ckpt), "--out", str(tmp_path),
                 *extra, *options()]) == 0
    frame = pd.read_csv(tmp_path / output)
    assert len(frame) > 0, f"{output} is empty"
