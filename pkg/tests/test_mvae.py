import numpy as np
import pandas as pd
import pytest
import torch

from src.exceptions import ContractError
from src.grid import GridSpec
from src.mvae import (
    MaskViTVAE,
    VaeBundle,
    VaeConfig,
    compression_ratio,
    kl_divergence,
    latent_channels,
    observed_tiles,
    patch_mask,
    reconstruction_mae,
    train_vae,
    vae_loss,
)
from src.nncore import OptimConfig
from src.obsio import GriddedField, fit_stats, normalize, write_checkpoint
from src.synthgen import FieldConfig, gen_truth

SMALL_GRID = GridSpec(height=24, width=48, tile=12)


def tiny_config(steps=3):
    return VaeConfig(patch=4, dim=16, enc_depth=1, dec_depth=1, quant_depth=1, heads=2,
                     optim=OptimConfig(lr=1e-3, total_steps=steps, batch_size=4, log_every=1))


@pytest.fixture(scope="module")
def observed_field():
    truth = gen_truth(FieldConfig(channel_couplings=[(1.0, 0.0), (-0.5, 0.2)]), SMALL_GRID, 6, modality="amsua")
    data = truth.data.copy()
    data[:, :, :, 20:40] = np.nan
    return GriddedField(modality="amsua", data=data, timestamps=truth.timestamps)


@pytest.fixture(scope="module")
def trained(observed_field, tmp_path_factory):
    log = tmp_path_factory.mktemp("vae") / "vae_log.csv"
    bundle = train_vae(observed_field, SMALL_GRID.tile, tiny_config(), seed=0, log_path=log)
    return bundle, log


def test_compression_ratio():
    assert latent_channels(3) == 12
    assert compression_ratio(24, 8, 3) == 16.0
    assert compression_ratio(144, 16, 22) == 64.0


def test_token_count_at_full_tile_size():
    cfg = VaeConfig(patch=16, dim=16, enc_depth=1, dec_depth=1, heads=2)
    model = MaskViTVAE(cfg, channels=5, tile=144)
    assert model.num_tokens == 81
    latent = model.encode(torch.randn(1, 5, 144, 144))
    assert latent.z.shape == (1, 81, 20)
    assert model.decode(latent.z).shape == (1, 5, 144, 144)


def test_patch_mask_threshold():
    x = torch.full((1, 3, 8, 8), float("nan"))
    x[0, 0, 0, :8] = 1.0
    x[0, 0, 1, :8] = 1.0
    x[0, 0, 2, :3] = 1.0  # 19 of 192 cells
    assert not patch_mask(x, 8, 0.10).any()
    x[0, 0, 2, 3] = 1.0
    assert patch_mask(x, 8, 0.10).all()


def test_kl_divergence():
    assert kl_divergence(torch.zeros(2, 4), torch.ones(2, 4)).tolist() == [0.0, 0.0]
    assert kl_divergence(torch.ones(1, 2), torch.ones(1, 2)).item() == pytest.approx(1.0)
    with pytest.raises(ContractError):
        kl_divergence(torch.zeros(1, 2), torch.zeros(1, 2))


def test_vae_loss_ignores_unobserved_patches():
    x = torch.randn(1, 2, 8, 8)
    recon = x.clone()
    recon[:, :, :4, :4] += 10.0
    mu = torch.zeros(1, 4, 8)
    sigma = torch.ones(1, 4, 8)
    hidden_first = torch.tensor([[False, True, True, True]])
    total, recon_mae, kl = vae_loss(x, recon, mu, sigma, 1.0, token_mask=hidden_first, patch=4)
    assert recon_mae.item() == 0.0
    assert kl.item() == 0.0 and total.item() == 0.0
    _, all_cells, _ = vae_loss(x, recon, mu, sigma, 1.0)
    assert all_cells.item() == pytest.approx(2.5)


def test_encoder_latents_do_not_see_unobserved_patches():
    torch.manual_seed(0)
    model = MaskViTVAE(tiny_config(), channels=2, tile=12).eval()
    x = torch.randn(1, 2, 12, 12)
    x[:, :, :4, :4] = float("nan")
    x[0, 0, 0, 0] = 3.0  # one value, far below the threshold
    before = model.encode(x)
    x2 = x.clone()
    x2[0, 0, 0, 0] = -40.0
    after = model.encode(x2)
    assert not before.observed[0, 0] and before.observed[0, 1:].all()
    assert torch.allclose(before.mu[0, 1:], after.mu[0, 1:], atol=1e-6, rtol=0)


def test_fully_unobserved_tile_encodes_to_finite_latents():
    model = MaskViTVAE(tiny_config(), channels=2, tile=12).eval()
    latent = model.encode(torch.full((2, 2, 12, 12), float("nan")))
    assert not latent.observed.any()
    assert torch.isfinite(latent.z).all()


def test_observed_tiles_skip_empty_samples(observed_field):
    stats = fit_stats(observed_field)
    tiles = observed_tiles(normalize(observed_field, stats), 12, 4, 0.10)
    # the blank band 20..39 empties tile column 2 only
    assert tiles.shape == (6 * 2 * 3, 2, 12, 12)


def test_train_vae_writes_log_and_roundtrips(trained, observed_field, tmp_path):
    bundle, log = trained
    frame = pd.read_csv(log)
    assert list(frame.columns) == ["step", "lr", "recon_mae", "kl"]
    assert list(frame["step"]) == [1, 2, 3]
    assert np.isfinite(reconstruction_mae(bundle, observed_field))

    loaded = VaeBundle.load(bundle.save(tmp_path / "vae_amsua.ckpt"))
    assert loaded.modality == "amsua"
    assert loaded.stats == bundle.stats
    tiles = np.random.default_rng(0).normal(size=(3, 2, 12, 12)).astype(np.float32)
    z_a, obs_a = bundle.encode_tiles(tiles)
    z_b, obs_b = loaded.encode_tiles(tiles)
    assert np.array_equal(z_a, z_b) and np.array_equal(obs_a, obs_b)
    assert np.array_equal(bundle.decode_tiles(z_a), loaded.decode_tiles(z_b))


def test_train_vae_is_deterministic(trained, observed_field):
    bundle, _ = trained
    again = train_vae(observed_field, SMALL_GRID.tile, tiny_config(), seed=0)
    for (name, a), (_, b) in zip(bundle.model.state_dict().items(), again.model.state_dict().items()):
        assert torch.equal(a, b), f"{name} differs between two runs with the same seed"


def test_wrong_checkpoint_kind(tmp_path):
    path = write_checkpoint({"w": np.ones(2)}, tmp_path / "x.ckpt", meta={"kind": "aida"})
    with pytest.raises(ContractError):
        VaeBundle.load(path)
