"""
Layers shared by the VAE, the assimilation MAE and the forecaster: masked
attention, pre-norm transformer blocks, feed-forward variants, patch
embedding, masked losses, the AdamW + warmup-cosine schedule and a
finite-difference gradient checker.
"""
from typing import Callable, Dict, Optional, Tuple
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from pydantic import BaseModel, model_validator

from src.exceptions import ArgumentError, ContractError

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
FFN_RATIO = 4

ModelParams = Dict[str, np.ndarray]


class OptimConfig(BaseModel):
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.1
    warmup_lr: float = 1e-6
    min_lr: float = 1e-6
    total_steps: int = 1000
    batch_size: int = 8
    log_every: int = 100

    @model_validator(mode="after")
    def _check(self) -> "OptimConfig":
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if min(self.lr, self.warmup_lr, self.min_lr) < 0:
            raise ValueError("learning rates must be nonnegative")
        return self


# ---------------------------------------------------------------------------
# elementwise layers

def layer_norm(x: torch.Tensor, weight: Optional[torch.Tensor] = None,
               bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    dim = x.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and p.shape != (dim,):
            raise ArgumentError(f"layer_norm {name} shape {tuple(p.shape)} does not match dim {dim}")
    return F.layer_norm(x, (dim,), weight, bias, eps=LN_EPS)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def _check_dim(x: torch.Tensor, dim: int, where: str) -> None:
    if x.shape[-1] != dim:
        raise ArgumentError(f"{where}: last dim {x.shape[-1]} != model dim {dim}")


class GeluFFN(nn.Module):
    def __init__(self, dim: int, ratio: int = FFN_RATIO):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_dim(x, self.dim, "gelu_ffn")
        return self.fc2(gelu(self.fc1(x)))


class SwiGLUFFN(nn.Module):
    def __init__(self, dim: int, ratio: int = FFN_RATIO):
        super().__init__()
        self.dim = dim
        self.gate = nn.Linear(dim, ratio * dim)
        self.up = nn.Linear(dim, ratio * dim)
        self.down = nn.Linear(ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_dim(x, self.dim, "swiglu_ffn")
        return self.down(F.silu(self.gate(x)) * self.up(x))


def gelu_ffn(x: torch.Tensor, ffn: GeluFFN) -> torch.Tensor:
    return ffn(x)


def swiglu_ffn(x: torch.Tensor, ffn: SwiGLUFFN) -> torch.Tensor:
    return ffn(x)


# ---------------------------------------------------------------------------
# attention

def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
                     key_mask: Optional[torch.Tensor] = None,
                     inert: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Multi-head scaled dot-product attention with hidden keys.

    q: [B, Nq, D]; k, v: [B, Nk, D]
    key_mask: bool, True = visible; [B, Nk] or [B, Nq, Nk]
    inert: bool [B, Nq] or [B]; inert queries output exactly zero

    Hidden keys get -inf logits, so their keys and values never reach a
    visible query's output.
    """
    B, Nq, D = q.shape
    Nk = k.shape[1]
    if D % heads:
        raise ArgumentError(f"dim {D} not divisible by {heads} heads")
    if k.shape != (B, Nk, D) or v.shape != (B, Nk, D):
        raise ArgumentError(f"q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} do not line up")

    if key_mask is None:
        visible = torch.ones(B, Nq, Nk, dtype=torch.bool, device=q.device)
    elif key_mask.dim() == 2:
        visible = key_mask[:, None, :].expand(B, Nq, Nk)
    else:
        visible = key_mask
    if inert is None:
        inert_q = torch.zeros(B, Nq, dtype=torch.bool, device=q.device)
    elif inert.dim() == 1:
        inert_q = inert[:, None].expand(B, Nq)
    else:
        inert_q = inert

    starved = ~visible.any(dim=-1) & ~inert_q
    if starved.any():
        b, n = (int(i) for i in starved.nonzero()[0])
        raise ContractError(f"query {n} of sample {b} has no visible key and is not inert")
    # inert rows attend everywhere so softmax stays finite; their output is zeroed below
    visible = visible | inert_q[..., None]

    qh = rearrange(q, "b n (h d) -> b h n d", h=heads)
    kh = rearrange(k, "b n (h d) -> b h n d", h=heads)
    vh = rearrange(v, "b n (h d) -> b h n d", h=heads)
    logits = (qh @ kh.transpose(-2, -1)) * (D // heads) ** -0.5
    logits = logits.masked_fill(~visible[:, None], float("-inf"))
    weights = logits.softmax(dim=-1)
    out = rearrange(weights @ vh, "b h n d -> b n (h d)")
    return out.masked_fill(inert_q[..., None], 0.0)


class MaskedSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ArgumentError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                inert: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(masked_attention(q, k, v, self.heads, key_mask=key_mask, inert=inert))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then x + ffn(LN(x))."""

    def __init__(self, dim: int, heads: int, ffn: str = "gelu"):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = MaskedSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        if ffn == "gelu":
            self.ffn = GeluFFN(dim)
        elif ffn == "swiglu":
            self.ffn = SwiGLUFFN(dim)
        else:
            raise ArgumentError(f"unknown ffn {ffn!r}")

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                inert: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_mask=key_mask, inert=inert)
        return x + self.ffn(self.norm2(x))


class PatchEmbed(nn.Module):
    """[B, C, tile, tile] -> [B, (tile/P)^2, D] tokens with a learned positional embedding."""

    def __init__(self, in_chans: int, tile: int, patch: int, dim: int):
        super().__init__()
        if patch <= 0 or tile % patch:
            raise ArgumentError(f"patch {patch} does not divide tile {tile}")
        self.in_chans = in_chans
        self.tile = tile
        self.patch = patch
        self.grid = tile // patch
        self.num_tokens = self.grid * self.grid
        self.proj = nn.Conv2d(in_chans, dim, kernel_size=patch, stride=patch)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_tokens, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != (self.in_chans, self.tile, self.tile):
            raise ArgumentError(f"patch_embed expects [B, {self.in_chans}, {self.tile}, {self.tile}], got {tuple(x.shape)}")
        tokens = rearrange(self.proj(x), "b d h w -> b (h w) d")
        return tokens + self.pos_embed


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


# ---------------------------------------------------------------------------
# parameters

def export_params(model: nn.Module) -> ModelParams:
    return {name: t.detach().cpu().float().numpy().copy() for name, t in model.state_dict().items()}


def import_params(model: nn.Module, params: ModelParams) -> None:
    expected = model.state_dict()
    missing = sorted(set(expected) - set(params))
    unexpected = sorted(set(params) - set(expected))
    if missing or unexpected:
        raise ContractError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, tensor in expected.items():
        if tuple(tensor.shape) != tuple(params[name].shape):
            raise ContractError(f"checkpoint mismatch: {name} is {params[name].shape}, model wants {tuple(tensor.shape)}")
    model.load_state_dict({name: torch.from_numpy(np.asarray(params[name])).to(expected[name].dtype)
                           for name in expected})


# ---------------------------------------------------------------------------
# optimisation

def cosine_lr(step: int, cfg: OptimConfig) -> float:
    """Linear warmup from warmup_lr to lr over the first warmup_fraction of steps, then cosine to min_lr."""
    if step < 1:
        raise ArgumentError(f"step must be >= 1, got {step}")
    warm = round(cfg.total_steps * cfg.warmup_fraction)
    if warm > 0 and step <= warm:
        return cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * step / warm
    progress = min(1.0, (step - warm) / max(1, cfg.total_steps - warm))
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.warmup_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def adamw_step(optimizer: torch.optim.Optimizer, step: int, cfg: OptimConfig) -> float:
    """Set the scheduled learning rate and apply one decoupled-weight-decay update."""
    lr = cosine_lr(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return lr


# ---------------------------------------------------------------------------
# losses

def _valid_cells(target: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    valid = ~torch.isnan(target)
    if mask is not None:
        valid = valid & mask
    if not bool(valid.any()):
        raise ContractError("loss has no valid target cells")
    return valid


def masked_mae_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean |pred - target| over non-NaN target cells (and `mask`, if given)."""
    if pred.shape != target.shape:
        raise ArgumentError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    valid = _valid_cells(target, mask)
    diff = torch.where(valid, pred - torch.nan_to_num(target), torch.zeros_like(pred))
    return diff.abs().sum() / valid.sum()


def masked_mse_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ArgumentError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    valid = _valid_cells(target, mask)
    diff = torch.where(valid, pred - torch.nan_to_num(target), torch.zeros_like(pred))
    return (diff * diff).sum() / valid.sum()


# ---------------------------------------------------------------------------
# gradient checking

SCALE_FLOOR = 1e-4


class GradCheckResult(BaseModel):
    max_rel_error: float
    worst_param: str
    per_param: Dict[str, float]


def grad_check(loss_fn: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
               params: Dict[str, torch.Tensor], eps: float = 1e-4,
               max_entries: Optional[int] = None, seed: int = 0) -> GradCheckResult:
    """
    Compare autograd against central differences in float64.

    The step for each entry is eps * max(1, |theta|). Each tensor's error is
    its largest absolute disagreement divided by its own largest gradient
    magnitude (analytic or numeric). That scale is floored at
    SCALE_FLOOR times the largest magnitude over all tensors, so a tensor
    whose true gradient vanishes is measured against finite-difference noise.
    With `max_entries`, each tensor is checked at that many entries drawn
    with `seed`.
    """
    params = {name: p.detach().to(torch.float64).clone().requires_grad_(True) for name, p in params.items()}
    loss = loss_fn(params)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {name: (g if g is not None else torch.zeros_like(p)).detach()
                for (name, p), g in zip(params.items(), grads)}

    generator = torch.Generator().manual_seed(seed)
    abs_err: Dict[str, float] = {}
    scales: Dict[str, float] = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            grad_flat = analytic[name].reshape(-1)
            entries = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                entries = torch.randperm(flat.numel(), generator=generator)[:max_entries]
            worst, scale = 0.0, 0.0
            for i in entries.tolist():
                original = flat[i].item()
                h = eps * max(1.0, abs(original))
                flat[i] = original + h
                f_plus = loss_fn(params).item()
                flat[i] = original - h
                f_minus = loss_fn(params).item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = grad_flat[i].item()
                worst = max(worst, abs(a - numeric))
                scale = max(scale, abs(a), abs(numeric))
            abs_err[name] = worst
            scales[name] = scale
    floor = max(SCALE_FLOOR * max(scales.values(), default=0.0), 1e-12)
    per_param = {name: err / max(scales[name], floor) for name, err in abs_err.items()}
    worst_param = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckResult(max_rel_error=per_param.get(worst_param, 0.0), worst_param=worst_param, per_param=per_param)


def module_params(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {name: p for name, p in module.named_parameters()}


class _LossModule(nn.Module):
    def __init__(self, inner: nn.Module, forward: Callable[[nn.Module], torch.Tensor]):
        super().__init__()
        self.inner = inner
        self.fn = forward

    def forward(self) -> torch.Tensor:
        return self.fn(self.inner)


def functional_loss(module: nn.Module, forward: Callable[[nn.Module], torch.Tensor]) -> Callable[[Dict[str, torch.Tensor]], torch.Tensor]:
    """Wrap `forward(module)` as a function of a parameter dict, for grad_check."""
    wrapped = _LossModule(module, forward)

    def loss_fn(params: Dict[str, torch.Tensor]) -> torch.Tensor:
        return torch.func.functional_call(wrapped, {f"inner.{k}": v for k, v in params.items()}, ())
    return loss_fn
