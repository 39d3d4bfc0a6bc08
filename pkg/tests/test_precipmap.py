import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.exceptions import ArgumentError, StatisticsError
from src.grid import GridSpec
from src.nncore import OptimConfig
from src.obsio import GriddedField
from src.precipmap import (
    SP_TRANSFORM,
    TCWV_TRANSFORM,
    LogTransform,
    PrecipBundle,
    PrecipConfig,
    log_field,
    log_fwd,
    log_inv,
    log_space_mae,
    map_precip,
    tokens_by_hour,
    train_precip_head,
)

SMALL_GRID = GridSpec(height=24, width=48, tile=12)
PATCH = 4
SIDE = 3
LATENT = 8
HOURS = 3


def tiny_config():
    return PrecipConfig(dim=16, depth=1, heads=2, optim=OptimConfig(lr=1e-3, total_steps=3, batch_size=4, log_every=1))


@pytest.fixture(scope="module")
def sample():
    rng = np.random.default_rng(0)
    tokens = rng.normal(size=(2, 4, HOURS, LATENT, SIDE, SIDE)).astype(np.float32)
    sp = rng.gamma(0.5, 2.0, size=(HOURS, 24, 48))
    sp[sp < 0.5] = 0.0
    tcwv = rng.uniform(5.0, 45.0, size=(HOURS, 24, 48))
    targets = GriddedField(modality="precip", data=np.stack([sp, tcwv], axis=1).astype(np.float32),
                           timestamps=list(range(HOURS)))
    observed = np.zeros((HOURS, 24, 48), dtype=bool)
    observed[:, :, :30] = True
    return tokens, targets, observed


@pytest.fixture(scope="module")
def trained(sample, tmp_path_factory):
    tokens, targets, observed = sample
    log = tmp_path_factory.mktemp("precip") / "precip_log.csv"
    bundle = train_precip_head(tokens, targets, observed, SMALL_GRID, PATCH, tiny_config(), seed=0, log_path=log)
    return bundle, log


def test_log_transform_of_zero():
    assert log_fwd(np.array(0.0), SP_TRANSFORM) == pytest.approx(math.log(100.0), abs=1e-12)
    assert log_fwd(np.array(0.0), TCWV_TRANSFORM) == pytest.approx(0.0, abs=1e-12)


def test_log_transform_rejects_negative_values():
    with pytest.raises(ArgumentError):
        log_fwd(np.array([1.0, -0.1]), SP_TRANSFORM)
    # missing values pass through
    assert np.isnan(log_fwd(np.array([np.nan, 1.0]), TCWV_TRANSFORM)[0])
    with pytest.raises(ValidationError):
        LogTransform(a=0.0, b=1.0)


def test_log_inverse_roundtrip_and_clamp():
    x = np.array([0.0, 1e-6, 0.3, 12.0, 80.0])
    for t in (SP_TRANSFORM, TCWV_TRANSFORM):
        assert np.allclose(log_inv(log_fwd(x, t), t), x, rtol=1e-9, atol=1e-12)
    assert log_inv(np.array([math.log(50.0)]), SP_TRANSFORM)[0] == 0.0, "Values below the offset clamp to zero"
    assert np.isnan(log_inv(np.array([np.nan]), SP_TRANSFORM)[0])


def test_log_field_channels(sample):
    _, targets, _ = sample
    logged = log_field(targets)
    assert logged.shape == targets.shape
    assert np.allclose(logged.data[:, 1], np.log(targets.data[:, 1].astype(np.float64) + 1.0), atol=1e-5)


def test_tokens_by_hour_order():
    tokens = np.zeros((2, 4, HOURS, LATENT, SIDE, SIDE), dtype=np.float32)
    tokens[1, 2, 1, :, 0, 2] = 7.0
    flat = tokens_by_hour(tokens)
    assert flat.shape == (2 * 4 * HOURS, SIDE * SIDE, LATENT)
    assert (flat[(1 * 4 + 2) * HOURS + 1, 2] == 7.0).all()
    assert np.count_nonzero(flat) == LATENT


def test_train_precip_head_log(trained):
    _, log = trained
    frame = pd.read_csv(log)
    assert list(frame.columns) == ["step", "lr", "loss"]
    assert np.isfinite(frame["loss"]).all()


def test_map_precip_is_nonnegative(trained, sample):
    bundle, _ = trained
    tokens, targets, observed = sample
    field = map_precip(tokens, bundle, targets.timestamps)
    assert field.shape == (HOURS, 2, 24, 48)
    assert np.isfinite(field.data).all()
    assert (field.data >= 0).all(), "Precipitation must never be negative"
    assert np.isfinite(log_space_mae(bundle, tokens, targets, observed))


def test_bundle_roundtrip(trained, sample, tmp_path):
    bundle, _ = trained
    tokens, targets, _ = sample
    loaded = PrecipBundle.load(bundle.save(tmp_path / "precip.ckpt"))
    assert loaded.stats == bundle.stats
    assert loaded.cfg == bundle.cfg
    a = map_precip(tokens, bundle, targets.timestamps)
    b = map_precip(tokens, loaded, targets.timestamps)
    assert np.array_equal(a.data, b.data)


def test_no_observed_target(sample):
    tokens, targets, observed = sample
    with pytest.raises(StatisticsError):
        train_precip_head(tokens, targets, np.zeros_like(observed), SMALL_GRID, PATCH, tiny_config(), seed=0)
