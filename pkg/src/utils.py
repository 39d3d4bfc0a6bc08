from typing import Any, Dict, List, Optional, Union
from pathlib import Path
import logging
import os
import random

import numpy as np
import pandas as pd
import torch
from dotenv import load_dotenv
from pydantic import BaseModel

load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install a single stream handler on the root logger."""
    level = level or os.getenv("DAWP_LOG_LEVEL", "INFO")
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level.upper())


def get_global_seed(default: int = 0) -> int:
    """Seed fallback from the DAWP_SEED environment variable (a .env file is honoured)."""
    value = os.getenv("DAWP_SEED")
    if value is None or not value.strip():
        return default
    return int(value)


def seed_everything(seed: int) -> np.random.Generator:
    """Seed python, numpy and torch; return a fresh numpy generator for the caller."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def pydantic_to_flat_config(model: BaseModel, prefix: str = "") -> Dict[str, str]:
    """Flatten a pydantic model into dotted key -> text value pairs."""
    flat: Dict[str, str] = {}
    for key, value in model.model_dump(mode="json").items():
        _flatten(f"{prefix}{key}", value, flat)
    return flat


def _flatten(key: str, value: Any, out: Dict[str, str]) -> None:
    if isinstance(value, dict):
        for sub_key, sub_value in value.items():
            _flatten(f"{key}.{sub_key}", sub_value, out)
    elif isinstance(value, (list, tuple)):
        out[key] = ",".join(_format_item(v) for v in value)
    elif isinstance(value, bool):
        out[key] = "true" if value else "false"
    elif value is None:
        out[key] = ""
    else:
        out[key] = str(value)


def _format_item(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ":".join(str(v) for v in value)
    return str(value)


def save_flat_config(flat: Dict[str, str], filepath: Union[str, Path]) -> Path:
    """Write key=value lines, sorted, so two runs with the same config produce the same bytes."""
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for key in sorted(flat):
            f.write(f"{key}={flat[key]}\n")
    return path


def save_to_csv(rows: Union[pd.DataFrame, List[Dict[str, Any]]], filepath: Union[str, Path],
                columns: Optional[List[str]] = None) -> Path:
    """Save records to a CSV file, creating the directory if needed."""
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows, columns=columns)
    if columns is not None:
        frame = frame.reindex(columns=columns)
    frame.to_csv(path, index=False, float_format="%.9g")
    logger.info(f"CSV saved to: {path}")
    return path
