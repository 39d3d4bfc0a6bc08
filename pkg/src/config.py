"""
Run configuration: one pydantic model for the whole pipeline, filled from flat
key=value preset files with dotted keys, a user config file and --set overrides.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union, get_args, get_origin
from pathlib import Path
import logging

from pydantic import BaseModel, Field, ValidationError, model_validator

from src.aida import AidaConfig
from src.aiwp import AiwpConfig
from src.exceptions import ConfigError
from src.grid import GridSpec
from src.mvae import VaeConfig
from src.precipmap import PrecipConfig
from src.synthgen import FieldConfig, ModalityConfig
from src.utils import get_global_seed, pydantic_to_flat_config, save_flat_config

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent.parent / "data" / "presets"
RESOLVED_CONFIG_NAME = "resolved_config.cfg"
DEFAULT_PRESET = "desk"


class DataConfig(BaseModel):
    hours: int = 240
    train_fraction: float = 0.8
    with_precip: bool = True
    write_swaths: bool = False

    @model_validator(mode="after")
    def _check(self) -> "DataConfig":
        if self.hours < 1:
            raise ValueError("hours must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        return self


class RunConfig(BaseModel):
    preset: str = DEFAULT_PRESET
    grid: GridSpec
    time_window: int = 4
    modalities: Dict[str, ModalityConfig]
    field: FieldConfig = Field(default_factory=FieldConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    vae: VaeConfig = Field(default_factory=VaeConfig)
    aida: AidaConfig = Field(default_factory=AidaConfig)
    aiwp: AiwpConfig = Field(default_factory=AiwpConfig)
    precip: PrecipConfig = Field(default_factory=PrecipConfig)
    seed: Optional[int] = None
    jobs: int = 1

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if not self.modalities:
            raise ValueError("at least one modality is required")
        if self.time_window < 1:
            raise ValueError("time_window must be positive")
        if self.grid.tile % self.vae.patch:
            raise ValueError(f"patch {self.vae.patch} does not divide tile {self.grid.tile}")
        if self.precip.modality not in self.modalities:
            raise ValueError(f"precip modality {self.precip.modality!r} is not configured")
        for name, modality in self.modalities.items():
            if modality.orbit.swath_width >= self.grid.width:
                raise ValueError(f"{name}: swath_width {modality.orbit.swath_width} must be below grid width {self.grid.width}")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        return self

    @property
    def tokens_side(self) -> int:
        return self.grid.tile // self.vae.patch


def read_flat_config(path: Union[str, Path]) -> Dict[str, str]:
    """Parse key=value lines; blank lines and '#' comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    flat: Dict[str, str] = {}
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")
        flat[key.strip()] = value.strip()
    return flat


def preset_flat(name: str, _seen: Tuple[str, ...] = ()) -> Dict[str, str]:
    """Flat keys of a named preset, following its own `preset=` line."""
    if name in _seen:
        raise ConfigError(f"preset cycle: {' -> '.join(_seen + (name,))}")
    path = PRESET_DIR / f"{name}.cfg"
    if not path.exists():
        available = sorted(p.stem for p in PRESET_DIR.glob("*.cfg"))
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(available)})")
    flat = read_flat_config(path)
    parent = flat.pop("preset", None)
    if parent and parent != name:
        merged = preset_flat(parent, _seen + (name,))
        merged.update(flat)
        flat = merged
    return flat


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    flat = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        flat[key.strip()] = value.strip()
    return flat


def _unflatten(flat: Dict[str, str]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"key {key!r} conflicts with scalar {part!r}")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"key {key!r} names a section, not a value")
        node[parts[-1]] = value
    return nested


def _coerce(annotation: Any, value: Any, key: str, sep: str = ",") -> Any:
    """Turn the text leaves of a nested key dict into what `annotation` expects."""
    origin = get_origin(annotation)
    args = get_args(annotation)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if isinstance(value, str) and value == "" and len(inner) < len(args):
            return None
        return _coerce(inner[0], value, key, sep)
    if isinstance(value, dict):
        if origin is dict:
            return {name: _coerce(args[1], sub, f"{key}.{name}") for name, sub in value.items()}
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            out = {}
            for name, sub in value.items():
                if name not in annotation.model_fields:
                    raise ConfigError(f"unknown config key {key + '.' if key else ''}{name}")
                out[name] = _coerce(annotation.model_fields[name].annotation, sub, f"{key + '.' if key else ''}{name}")
            return out
        raise ConfigError(f"config key {key} takes a value, not a section")
    if origin is list:
        items = [s.strip() for s in value.split(",") if s.strip()]
        return [_coerce(args[0], item, key, sep=":") for item in items]
    if origin is tuple:
        parts = [s.strip() for s in value.split(sep)]
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values separated by {sep!r}, got {value!r}")
        return tuple(_coerce(a, p, key) for a, p in zip(args, parts))
    return value


def _validation_message(error: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in error.errors())


def build_config(flat: Dict[str, str]) -> RunConfig:
    try:
        return RunConfig.model_validate(_coerce(RunConfig, _unflatten(flat), ""))
    except ValidationError as e:
        raise ConfigError(f"invalid config: {_validation_message(e)}")


def load_config(preset: Optional[str] = None, config_path: Optional[Union[str, Path]] = None,
                overrides: Sequence[str] = ()) -> RunConfig:
    """
    Resolve the run configuration.

    Args:
    preset: Named preset; defaults to the config file's `preset=` line, then to desk
    config_path: Optional user config file of key=value lines
    overrides: key=value strings applied last

    Returns:
    The validated RunConfig
    """
    user = read_flat_config(config_path) if config_path else {}
    name = preset or user.pop("preset", None) or DEFAULT_PRESET
    user.pop("preset", None)
    flat = preset_flat(name)
    flat.update(user)
    flat.update(parse_overrides(overrides))
    flat["preset"] = name
    return build_config(flat)


def resolve_seed(cfg: RunConfig, cli_seed: Optional[int] = None) -> int:
    """--seed, then the config's seed, then DAWP_SEED, then 0."""
    if cli_seed is not None:
        return cli_seed
    if cfg.seed is not None:
        return cfg.seed
    return get_global_seed(0)


def save_resolved_config(cfg: RunConfig, out_dir: Union[str, Path], seed: Optional[int] = None) -> Path:
    """Echo the fully resolved config (with the seed actually used) beside a run's outputs."""
    resolved = cfg.model_copy(update={"seed": seed}) if seed is not None else cfg
    path = save_flat_config(pydantic_to_flat_config(resolved), Path(out_dir) / RESOLVED_CONFIG_NAME)
    logger.info(f"Config saved to: {path}")
    return path


def modality_names(cfg: RunConfig) -> List[str]:
    return list(cfg.modalities)
