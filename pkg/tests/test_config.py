import pytest

from src.config import (
    RESOLVED_CONFIG_NAME,
    load_config,
    parse_overrides,
    read_flat_config,
    resolve_seed,
    save_resolved_config,
)
from src.exceptions import ConfigError
from src.mvae import compression_ratio, latent_channels
from src.statecache import init_cache


def test_desk_preset():
    cfg = load_config("desk")
    assert cfg.preset == "desk"
    assert (cfg.grid.height, cfg.grid.width, cfg.grid.tile) == (96, 192, 24)
    assert (cfg.grid.tiles_h, cfg.grid.tiles_w) == (4, 8)
    assert cfg.tokens_side == 3
    assert list(cfg.modalities) == ["amsua", "mhs"]
    assert cfg.modalities["amsua"].couplings[1] == (-0.8, 0.2)
    assert cfg.field.advection == (1.0, 0.0)
    assert compression_ratio(cfg.grid.tile, cfg.vae.patch, 3) == 16.0
    assert cfg.seed is None


def test_paper_preset_sizes():
    cfg = load_config("paper")
    assert (cfg.grid.tiles_h, cfg.grid.tiles_w) == (8, 16)
    assert cfg.tokens_side == 9
    assert cfg.time_window == 12
    assert {m: mod.channels for m, mod in cfg.modalities.items()} == {"amsua": 15, "atms": 22, "hirs": 20, "mhs": 5}
    assert cfg.aida.keep == 128
    assert cfg.vae.optim.betas == (0.9, 0.999)
    assert compression_ratio(cfg.grid.tile, cfg.vae.patch, 22) == 64.0
    cache = init_cache(cfg.grid, {"mhs": latent_channels(5)}, cfg.time_window, cfg.tokens_side)
    assert cache.buffer_shape("mhs") == (8, 16, 12, 20, 9, 9)


def test_paper_preset_optimiser_values():
    cfg = load_config("paper")
    assert cfg.preset == "paper"
    assert cfg.vae.kl_weight == pytest.approx(1e-6)
    batches = {}
    for stage in ("vae", "aida", "aiwp"):
        optim = getattr(cfg, stage).optim
        assert optim.lr == pytest.approx(1e-4), f"{stage} lr {optim.lr}"
        assert optim.weight_decay == pytest.approx(1e-5), f"{stage} weight decay {optim.weight_decay}"
        assert optim.warmup_fraction == pytest.approx(0.1), f"{stage} warmup {optim.warmup_fraction}"
        assert optim.total_steps == 200_000, f"{stage} steps {optim.total_steps}"
        batches[stage] = optim.batch_size
    assert batches == {"vae": 200, "aida": 48, "aiwp": 8}


def test_default_preset_is_desk():
    assert load_config().grid == load_config("desk").grid


def test_overrides_apply_last(tmp_path):
    user = tmp_path / "user.cfg"
    user.write_text("# a comment\npreset=desk\n\ntime_window=6\nvae.dim=32\n")
    cfg = load_config(config_path=user, overrides=["vae.dim=48", "aiwp.cbc=false", "seed=7"])
    assert cfg.time_window == 6
    assert cfg.vae.dim == 48
    assert cfg.aiwp.cbc is False
    assert cfg.seed == 7


def test_empty_seed_means_unset():
    assert load_config(overrides=["seed="]).seed is None


@pytest.mark.parametrize("overrides", [
    ["bogus=1"],
    ["vae.bogus=1"],
    ["vae=3"],
    ["vae.patch=7"],
    ["grid.tile=25"],
    ["precip.modality=hirs"],
    ["field.advection=1.0"],
    ["modalities.mhs.orbit.swath_width=192"],
])
def test_bad_config_is_a_config_error(overrides):
    with pytest.raises(ConfigError):
        load_config("desk", overrides=overrides)


def test_unknown_preset():
    with pytest.raises(ConfigError) as info:
        load_config("huge")
    assert "desk" in str(info.value), "The error should list the available presets"


def test_malformed_lines(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("grid.height 96\n")
    with pytest.raises(ConfigError):
        read_flat_config(bad)
    with pytest.raises(ConfigError):
        read_flat_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])


def test_resolve_seed_order(monkeypatch):
    monkeypatch.delenv("DAWP_SEED", raising=False)
    cfg = load_config("desk")
    assert resolve_seed(cfg) == 0
    monkeypatch.setenv("DAWP_SEED", "11")
    assert resolve_seed(cfg) == 11
    seeded = load_config("desk", overrides=["seed=5"])
    assert resolve_seed(seeded) == 5
    assert resolve_seed(seeded, cli_seed=3) == 3


def test_resolved_config_reloads_identically(tmp_path):
    cfg = load_config("desk", overrides=["vae.optim.lr=0.00025", "aiwp.init_mode=raw"])
    path = save_resolved_config(cfg, tmp_path, seed=9)
    assert path.name == RESOLVED_CONFIG_NAME
    assert "seed=9" in path.read_text().splitlines()
    reloaded = load_config(config_path=path)
    assert reloaded == cfg.model_copy(update={"seed": 9})
    assert path.read_bytes() == save_resolved_config(reloaded, tmp_path / "again").read_bytes()
