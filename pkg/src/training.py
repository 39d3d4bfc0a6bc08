from typing import Any, Callable, Dict, List, Optional, Tuple, Union
from pathlib import Path
import logging
import math

import numpy as np
import torch
import torch.nn as nn

from src.exceptions import NumericError
from src.nncore import OptimConfig, adamw_step, make_optimizer
from src.utils import save_to_csv, seed_everything

logger = logging.getLogger(__name__)

Batch = Any
LossFn = Callable[[nn.Module, Batch], Tuple[torch.Tensor, Dict[str, float]]]
SampleFn = Callable[[np.random.Generator], Batch]


def train_model(
    model: nn.Module,
    sample_batch: SampleFn,
    compute_loss: LossFn,
    optim: OptimConfig,
    seed: int,
    log_path: Optional[Union[str, Path]] = None,
    stage: str = "model",
    parameters: Optional[List[nn.Parameter]] = None,
    log_columns: Optional[List[str]] = None,
) -> List[Dict[str, float]]:
    """
    Run the shared AdamW + warmup-cosine loop.

    Args:
    model: Network to optimise in place
    sample_batch: Draws one batch from a numpy generator
    compute_loss: Returns (loss, extra metrics) for a batch
    optim: Optimiser and schedule settings
    seed: Seeds python, numpy and torch before the first step
    log_path: Training log CSV, one row per logged step
    stage: Name used in progress messages
    parameters: Trainable subset; defaults to every parameter that requires grad
    log_columns: Column order of the log CSV; defaults to every logged key

    Returns:
    The logged rows (step, lr, loss and the extra metrics)
    """
    rng = seed_everything(seed)
    params = parameters if parameters is not None else [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, optim)
    model.train()
    rows: List[Dict[str, float]] = []
    for step in range(1, optim.total_steps + 1):
        batch = sample_batch(rng)
        optimizer.zero_grad(set_to_none=False)
        loss, metrics = compute_loss(model, batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericError(f"{stage}: non-finite loss {value} at step {step}")
        loss.backward()
        lr = adamw_step(optimizer, step, optim)
        if step % optim.log_every == 0 or step == 1 or step == optim.total_steps:
            row = {"step": step, "lr": lr, "loss": value, **metrics}
            rows.append(row)
            logger.info(f"Training {stage} step {step}/{optim.total_steps}: loss {value:.6f}")
    model.eval()
    if log_path is not None:
        save_to_csv(rows, log_path, columns=log_columns)
    return rows
