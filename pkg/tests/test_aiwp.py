import numpy as np
import pandas as pd
import pytest
import torch

from src.aida import AidaBundle, AidaConfig, AssimilationMAE, EncodedField, LatentScaler, impute_window
from src.aiwp import (
    MOSAIC_SLOTS,
    AiwpBundle,
    AiwpConfig,
    TSForecaster,
    assemble_cbc,
    border_loss,
    evaluate_aiwp,
    join_channels,
    mosaic_from_buffers,
    place_mosaic,
    rollout,
    split_channels,
    token_archive,
    train_aiwp,
    training_pairs,
)
from src.exceptions import ArgumentError, ContractError
from src.grid import GridSpec, TileCoord
from src.mvae import MaskViTVAE, VaeBundle, VaeConfig, latent_channels
from src.nncore import OptimConfig
from src.obsio import GriddedField, NormStats
from src.statecache import init_cache

SMALL_GRID = GridSpec(height=24, width=48, tile=12)  # 2 x 4 tiles
CHANNELS = {"amsua": 3, "mhs": 2}
T = 2
PATCH = 4
SIDE = SMALL_GRID.tile // PATCH


def tiny_aiwp_config(**update):
    cfg = AiwpConfig(dim=16, depth=1, heads=2, optim=OptimConfig(lr=1e-3, total_steps=3, batch_size=2, log_every=1))
    return cfg.model_copy(update=update)


@pytest.fixture(scope="module")
def stack():
    """Untrained VAEs, assimilation model and forecaster sharing one geometry."""
    torch.manual_seed(0)
    vae_cfg = VaeConfig(patch=PATCH, dim=16, enc_depth=1, dec_depth=1, heads=2)
    vaes = {m: VaeBundle(MaskViTVAE(vae_cfg, c, SMALL_GRID.tile), NormStats(modality=m, mean=[0.0] * c, std=[1.0] * c), vae_cfg)
            for m, c in CHANNELS.items()}
    dims = {m: latent_channels(c) for m, c in CHANNELS.items()}
    aida_cfg = AidaConfig(enc_dim=16, enc_depth=1, dec_dim=16, dec_depth=1, heads=2, keep=4)
    scaler = LatentScaler(mean={m: [0.0] * d for m, d in dims.items()}, std={m: [1.0] * d for m, d in dims.items()})
    aida = AidaBundle(AssimilationMAE(aida_cfg, dims, SIDE * SIDE, T), scaler, aida_cfg)
    aiwp = AiwpBundle(TSForecaster(tiny_aiwp_config(), dims, SIDE, T), tiny_aiwp_config())
    return vaes, aida, aiwp, dims


@pytest.fixture(scope="module")
def initial_fields():
    rng = np.random.default_rng(0)
    fields = {}
    for m, c in CHANNELS.items():
        data = rng.normal(size=(T, c, 24, 48)).astype(np.float32)
        data[:, :, :, 10 + 5 * c:30] = np.nan
        fields[m] = GriddedField(modality=m, data=data, timestamps=[10, 11])
    return fields


@pytest.fixture(scope="module")
def archive(stack):
    _, aida, _, dims = stack
    rng = np.random.default_rng(1)
    hours = 10
    encoded = {m: EncodedField(modality=m, z=rng.normal(size=(2, 4, hours, SIDE * SIDE, d)).astype(np.float32),
                               observed=rng.random((2, 4, hours, SIDE * SIDE)) < 0.5, timestamps=list(range(hours)))
               for m, d in dims.items()}
    starts = training_pairs((0, hours), T)
    archive_starts = sorted(set(starts) | {s + T for s in starts})
    return token_archive(aida, encoded, archive_starts, SMALL_GRID, SIDE), starts


def tagged_buffers(dims, value_of=lambda r, c: r * 10 + c):
    buffers = {}
    for m, d in dims.items():
        buf = np.zeros((2, 4, T, d, SIDE, SIDE), dtype=np.float32)
        for r in range(2):
            for c in range(4):
                buf[r, c] = value_of(r, c)
        buffers[m] = buf
    return buffers


def test_place_mosaic_layout():
    center = np.full((T, 1, 2, 2), -1.0, dtype=np.float32)
    neighbours = [np.full((T, 1, 2, 2), float(k), dtype=np.float32) for k in range(8)]
    mosaic = place_mosaic(center, neighbours)
    assert mosaic.shape == (6, 6, T, 1)
    assert (mosaic[2:4, 2:4] == -1.0).all()
    for k, (br, bc) in enumerate(MOSAIC_SLOTS):
        assert (mosaic[2 * br:2 * br + 2, 2 * bc:2 * bc + 2] == k).all(), f"Neighbour {k} misplaced"


def test_full_scale_mosaic_shape():
    center = np.zeros((12, 3, 9, 9), dtype=np.float32)
    assert place_mosaic(center, [center] * 8).shape == (27, 27, 12, 3)


def test_cache_mosaic_matches_buffer_mosaic(stack):
    _, _, _, dims = stack
    buffers = tagged_buffers(dims)
    cache = init_cache(SMALL_GRID, dims, T, SIDE)
    cache.load_previous(buffers)
    for coord in [TileCoord(0, 0), TileCoord(1, 3)]:
        center = {m: cache.tile(m, coord) for m in dims}
        from_cache = assemble_cbc(cache, center, coord)
        from_buffers = mosaic_from_buffers(buffers, list(dims), coord)
        assert np.array_equal(from_cache, from_buffers)
    # top-left tile: the up neighbour sits across the pole, half a globe away
    mosaic = mosaic_from_buffers(buffers, list(dims), TileCoord(0, 0))
    assert mosaic[0, SIDE, 0, 0] == 2.0
    assert mosaic[2 * SIDE, SIDE, 0, 0] == 10.0


def test_no_cbc_replicates_the_centre(stack):
    _, _, _, dims = stack
    mosaic = mosaic_from_buffers(tagged_buffers(dims), list(dims), TileCoord(1, 2), cbc=False)
    assert (mosaic == 12.0).all()


def test_channel_split_roundtrip(stack):
    _, _, _, dims = stack
    rng = np.random.default_rng(2)
    tiles = {m: rng.normal(size=(T, d, SIDE, SIDE)).astype(np.float32) for m, d in dims.items()}
    joined = join_channels(tiles, list(dims))
    assert joined.shape == (SIDE, SIDE, T, sum(dims.values()))
    back = split_channels(joined, dims)
    for m in dims:
        assert np.array_equal(back[m], tiles[m])


def test_forecaster_shapes_and_spatial_hook(stack):
    _, _, aiwp, dims = stack
    model = aiwp.model
    x = torch.randn(1, 3 * SIDE, 3 * SIDE, T, sum(dims.values()))
    assert model(x).shape == (1, SIDE, SIDE, T, sum(dims.values()))
    assert model.forward_all(x).shape == x.shape
    with pytest.raises(ArgumentError):
        model(torch.randn(1, SIDE, SIDE, T, sum(dims.values())))

    x2 = x.clone()
    x2[:, :SIDE] += 5.0  # top row of neighbours only
    with torch.no_grad():
        assert not torch.allclose(model(x), model(x2))
        model.spatial_mixing = False
        try:
            assert torch.equal(model(x), model(x2)), "Without spatial mixing the centre must ignore its neighbours"
        finally:
            model.spatial_mixing = True


def test_border_loss_is_finite(stack):
    _, _, aiwp, dims = stack
    x = torch.randn(2, 3 * SIDE, 3 * SIDE, T, sum(dims.values()))
    with torch.no_grad():
        assert torch.isfinite(border_loss(aiwp.model, x, torch.zeros_like(x)))


def test_training_pairs():
    assert training_pairs((0, 10), 2) == [0, 1, 2, 3, 4, 5, 6]
    assert training_pairs((0, 3), 2) == []


def test_token_archive_covers_every_pair(stack, archive):
    _, _, _, dims = stack
    tokens, starts = archive
    assert set(tokens) == set(starts) | {s + T for s in starts}
    assert tokens[0]["amsua"].shape == (2, 4, T, dims["amsua"], SIDE, SIDE)
    for m in dims:
        assert np.isfinite(tokens[0][m]).all()


def test_train_aiwp_logs_centre_and_border(stack, archive, tmp_path):
    _, _, _, dims = stack
    tokens, starts = archive
    log = tmp_path / "aiwp_log.csv"
    bundle = train_aiwp(tokens, starts, dims, SMALL_GRID, SIDE, T, tiny_aiwp_config(), seed=0, log_path=log)
    frame = pd.read_csv(log)
    assert list(frame.columns) == ["step", "lr", "center_loss", "border_loss"]
    scores = evaluate_aiwp(bundle, tokens, starts[:2], SMALL_GRID)
    assert set(scores) == {"center_mse", "persistence_mse"}
    assert np.isfinite(scores["center_mse"])

    loaded = AiwpBundle.load(bundle.save(tmp_path / "aiwp.ckpt"))
    assert loaded.modalities == list(dims)
    assert evaluate_aiwp(loaded, tokens, starts[:2], SMALL_GRID) == scores
    with pytest.raises(ContractError):
        train_aiwp({}, starts, dims, SMALL_GRID, SIDE, T, tiny_aiwp_config(), seed=0)


def test_rollout_shapes_and_hours(stack, initial_fields):
    vaes, aida, aiwp, dims = stack
    result = rollout(initial_fields, vaes, aida, aiwp, SMALL_GRID, steps=2, decode_steps=[2])
    assert len(result.tokens) == 2
    assert result.timestamps == [[12, 13], [14, 15]]
    assert set(result.fields) == {2}
    for m, c in CHANNELS.items():
        field = result.fields[2][m]
        assert field.shape == (T, c, 24, 48)
        assert field.timestamps == [14, 15]
        assert not np.isnan(field.data).any(), "Forecast fields must be dense"


def test_rollout_is_independent_of_sweep_order(stack, initial_fields):
    vaes, aida, aiwp, _ = stack
    imputed = impute_window(initial_fields, vaes, aida, SMALL_GRID, decode=False)
    reference = rollout(imputed, vaes, aida, aiwp, SMALL_GRID, steps=2)
    coords = SMALL_GRID.tile_coords()
    rng = np.random.default_rng(0)
    for _ in range(5):
        order = [coords[i] for i in rng.permutation(len(coords))]
        shuffled = rollout(imputed, vaes, aida, aiwp, SMALL_GRID, steps=2, order=order)
        for step in range(2):
            for m in CHANNELS:
                assert np.array_equal(shuffled.tokens[step][m], reference.tokens[step][m]), "Sweep order changed the forecast"


def test_rollout_rejects_bad_arguments(stack, initial_fields):
    vaes, aida, aiwp, _ = stack
    with pytest.raises(ArgumentError):
        rollout(initial_fields, vaes, aida, aiwp, SMALL_GRID, steps=0)
    with pytest.raises(ArgumentError):
        rollout(initial_fields, vaes, aida, aiwp, SMALL_GRID, steps=1, order=[(0, 0)] * 8)
    with pytest.raises(ArgumentError):
        rollout(initial_fields, vaes, aida, aiwp, SMALL_GRID, steps=1, decode_steps=[2])


def test_rollout_is_dense_with_a_missing_modality(stack, initial_fields):
    vaes, aida, aiwp, _ = stack
    fields = dict(initial_fields)
    mhs = initial_fields["mhs"]
    fields["mhs"] = GriddedField(modality="mhs", data=np.full_like(mhs.data, np.nan), timestamps=mhs.timestamps)
    result = rollout(fields, vaes, aida, aiwp, SMALL_GRID, steps=1, decode_steps=[1])
    for m in CHANNELS:
        assert np.isfinite(result.tokens[0][m]).all()
        assert not np.isnan(result.fields[1][m].data).any(), f"{m}: forecast has gaps"
