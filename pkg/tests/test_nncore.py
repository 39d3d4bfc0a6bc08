import numpy as np
import pytest
import torch
from pydantic import ValidationError

from src.exceptions import ArgumentError, ContractError
from src.experiments import GRADCHECK_TOLERANCE, grad_check_table, layer_grad_checks
from src.nncore import (
    OptimConfig,
    PatchEmbed,
    TransformerBlock,
    cosine_lr,
    export_params,
    grad_check,
    import_params,
    masked_attention,
    masked_mae_loss,
    masked_mse_loss,
)


@pytest.fixture(scope="module")
def grad_results():
    return layer_grad_checks(dim=16, seed=0)


def test_every_layer_passes_grad_check(grad_results):
    expected = {"layer_norm", "masked_attention", "gelu_ffn", "swiglu_ffn", "patch_embed", "vae_loss", "ts_block"}
    assert set(grad_results) == expected
    for name, result in grad_results.items():
        assert result.max_rel_error < GRADCHECK_TOLERANCE, \
            f"{name}: relative error {result.max_rel_error:.2e} at {result.worst_param}"
    table = grad_check_table(grad_results)
    assert table["passed"].all()


def test_grad_check_catches_a_wrong_gradient():
    class WrongSquare(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x * x

        @staticmethod
        def backward(ctx, grad):
            (x,) = ctx.saved_tensors
            return grad * 3.0 * x

    x = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    result = grad_check(lambda p: WrongSquare.apply(p["x"]).sum(), {"x": x})
    assert result.max_rel_error > 0.1
    assert result.worst_param == "x"

    big = torch.full((4,), 1000.0, dtype=torch.float64)
    small = torch.full((4,), 1e-3, dtype=torch.float64)
    result = grad_check(lambda p: (p["big"] ** 2).sum() + WrongSquare.apply(p["small"]).sum(),
                        {"big": big, "small": small})
    assert result.worst_param == "small"
    assert result.max_rel_error > GRADCHECK_TOLERANCE, \
        f"A 50% error in a small-gradient tensor went unflagged ({result.max_rel_error:.2e})"
    assert result.per_param["big"] < GRADCHECK_TOLERANCE


def attention_inputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(2, 6, 8, generator=g, dtype=torch.float64) for _ in range(3)]


def test_hidden_keys_never_reach_visible_queries():
    q, k, v = attention_inputs()
    key_mask = torch.tensor([[True, False, True, True, False, True], [False, True, True, False, True, True]])
    out = masked_attention(q, k, v, heads=2, key_mask=key_mask)
    k2, v2 = k.clone(), v.clone()
    k2[~key_mask] = 1e3 * torch.randn(int((~key_mask).sum()), 8, dtype=torch.float64)
    v2[~key_mask] = -1e3
    out2 = masked_attention(q, k2, v2, heads=2, key_mask=key_mask)
    assert torch.equal(out, out2), "Hidden keys changed the attention output"


def test_hidden_tokens_do_not_change_visible_block_outputs():
    torch.manual_seed(0)
    block = TransformerBlock(8, heads=2).double().eval()
    x, _, _ = attention_inputs(1)
    key_mask = torch.tensor([[True, True, False, True, True, False]] * 2)
    out = block(x, key_mask=key_mask)
    x2 = x.clone()
    x2[~key_mask] = 50.0
    out2 = block(x2, key_mask=key_mask)
    assert torch.allclose(out[key_mask], out2[key_mask], atol=1e-12, rtol=0)


def test_starved_query_needs_to_be_inert():
    q, k, v = attention_inputs()
    key_mask = torch.ones(2, 6, 6, dtype=torch.bool)
    key_mask[0, 3] = False
    with pytest.raises(ContractError):
        masked_attention(q, k, v, heads=2, key_mask=key_mask)
    inert = torch.zeros(2, 6, dtype=torch.bool)
    inert[0, 3] = True
    out = masked_attention(q, k, v, heads=2, key_mask=key_mask, inert=inert)
    assert torch.count_nonzero(out[0, 3]) == 0
    assert torch.isfinite(out).all()


def test_attention_rejects_bad_heads():
    q, k, v = attention_inputs()
    with pytest.raises(ArgumentError):
        masked_attention(q, k, v, heads=3)


def test_patch_embed_shapes():
    embed = PatchEmbed(in_chans=3, tile=24, patch=8, dim=16)
    assert embed(torch.zeros(2, 3, 24, 24)).shape == (2, 9, 16)
    with pytest.raises(ArgumentError):
        embed(torch.zeros(2, 3, 16, 16))
    with pytest.raises(ArgumentError):
        PatchEmbed(in_chans=3, tile=24, patch=5, dim=16)


def test_masked_losses_skip_nan_targets():
    pred = torch.tensor([1.0, 2.0, 3.0])
    target = torch.tensor([1.0, float("nan"), 5.0])
    assert masked_mae_loss(pred, target).item() == 1.0
    assert masked_mse_loss(pred, target).item() == 2.0
    with pytest.raises(ContractError):
        masked_mae_loss(pred, torch.full((3,), float("nan")))


def test_cosine_schedule():
    cfg = OptimConfig(lr=1e-3, warmup_lr=1e-6, min_lr=1e-6, total_steps=100, warmup_fraction=0.1)
    assert cosine_lr(1, cfg) == pytest.approx(1e-6 + (1e-3 - 1e-6) / 10)
    assert cosine_lr(10, cfg) == pytest.approx(1e-3)
    assert cosine_lr(55, cfg) == pytest.approx(1e-6 + 0.5 * (1e-3 - 1e-6))
    assert cosine_lr(100, cfg) == pytest.approx(1e-6)
    lrs = [cosine_lr(s, cfg) for s in range(10, 101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:])), "Learning rate must decay after warmup"
    with pytest.raises(ArgumentError):
        cosine_lr(0, cfg)
    with pytest.raises(ValidationError):
        OptimConfig(warmup_fraction=1.0)


def test_params_roundtrip():
    torch.manual_seed(0)
    a = TransformerBlock(8, heads=2)
    b = TransformerBlock(8, heads=2)
    import_params(b, export_params(a))
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), f"{name} differs after import"
    params = export_params(a)
    params.pop(next(iter(params)))
    with pytest.raises(ContractError):
        import_params(b, params)
    assert all(isinstance(p, np.ndarray) for p in export_params(a).values())
