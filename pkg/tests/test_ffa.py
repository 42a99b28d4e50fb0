import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from musasplat import diffcore as dc
from musasplat.core import TokenGrid
from musasplat.ffa import (FeatureFusionAggregator, FfaConfig, IdentityAggregator, MemoryBankAggregator, fuse,
                           memory_bank_baseline, other_view_index)

from helpers import brute_force_fuse


def _feats(v=3, n=16, c=32, seed=0):
    return torch.randn(v, n, c, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_oracle_equivalence():
    agg = FeatureFusionAggregator(32, FfaConfig(tau=0.0), seed=3).double()
    x = _feats()
    out = agg(x, quality=torch.ones(3, 16, dtype=torch.float64), boundary=torch.zeros(3))
    assert np.abs(out.detach().numpy() - brute_force_fuse(agg, x)).max() < 1e-6


@given(st.integers(0, 10_000), st.floats(0.05, 0.9))
@settings(max_examples=20, deadline=None)
def test_masked_keys_receive_no_attention(seed, tau):
    agg = FeatureFusionAggregator(32, FfaConfig(tau=tau), seed=1).double()
    x = _feats(seed=seed)
    gen = torch.Generator().manual_seed(seed)
    q = torch.rand(3, 16, generator=gen, dtype=torch.float64)
    q[:, 0] = 0.99  # every view keeps at least one key
    agg(x, quality=q, boundary=torch.zeros(3))
    att = agg.last["attention"][:, 0]  # (V, L, (V-1) L)
    idx = other_view_index(3)
    key_q = q[idx].reshape(3, -1)  # quality of each key column, per query view
    received = (att * (key_q < tau)[:, None, :]).sum(dim=(1, 2))
    assert received.max() <= 1e-6


def test_boundary_boost_raises_weights():
    agg = FeatureFusionAggregator(32, FfaConfig(lambda_boost=3.0)).double()
    q = torch.full((2, 4), 0.5, dtype=torch.float64)
    w = agg.token_weights(q, torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert torch.allclose(w[0], torch.full((4,), 1.5, dtype=torch.float64))
    assert torch.allclose(w[1], q[1])


def test_boundary_view_draws_more_attention():
    agg = FeatureFusionAggregator(32, FfaConfig(tau=0.0), seed=2).double()
    x = _feats()
    ones = torch.ones(3, 16, dtype=torch.float64)
    agg(x, quality=ones, boundary=torch.tensor([0.0, 1.0, 0.0]))
    att = agg.last["attention"][0, 0]  # view 0 attends to views 1 and 2
    assert att[:, :16].sum() > att[:, 16:].sum()


def test_fuse_gradients_fp64():
    agg = FeatureFusionAggregator(16, seed=4).double()
    x = _feats(3, 6, 16)
    w = _feats(3, 6, 16, seed=9)
    assert dc.finite_difference_check(lambda v: (agg(v) * w).sum(), x) < 1e-4
    assert dc.check_module_gradients(lambda: (agg(x) * w).sum(), list(agg.parameters()), max_elems=8) < 1e-4


def test_boundary_mask_is_hard_and_detached():
    agg = FeatureFusionAggregator(16).double()
    x = _feats(4, 6, 16).requires_grad_(True)
    b = agg.boundary_mask(x)
    assert set(b.tolist()) <= {0.0, 1.0} and not b.requires_grad


@pytest.mark.parametrize("views", range(2, 9))
def test_invocation_counts(views):
    x = _feats(views, 4, 16)
    ffa = FeatureFusionAggregator(16).double()
    bank = MemoryBankAggregator(16).double()
    ffa(x)
    bank(x)
    assert ffa.stats["invocations"] == 1 and ffa.stats["peak_retained_tokens"] == 0
    assert bank.stats["invocations"] == views - 1
    assert bank.stats["peak_retained_tokens"] == views * 4


def test_single_view_is_rejected():
    with pytest.raises(ValueError):
        FeatureFusionAggregator(16)(torch.zeros(1, 4, 16))
    with pytest.raises(ValueError):
        fuse([TokenGrid(0, torch.zeros(4, 16), 2, 2)], FeatureFusionAggregator(16))


def test_config_validation():
    with pytest.raises(ValueError):
        FfaConfig(lambda_boost=0.5)
    with pytest.raises(ValueError):
        FfaConfig(tau=1.5)


def test_wrappers_and_identity():
    grids = [TokenGrid(i, torch.randn(4, 16), 2, 2) for i in range(3)]
    out = fuse(grids, FeatureFusionAggregator(16))
    assert [g.view_index for g in out] == [0, 1, 2]
    assert len(memory_bank_baseline(grids, MemoryBankAggregator(16))) == 3
    x = torch.randn(2, 4, 16)
    assert IdentityAggregator()(x) is x


def test_aux_loss_defaults_to_zero():
    agg = FeatureFusionAggregator(16)
    agg(torch.randn(2, 4, 16))
    assert agg.aux_loss().item() == 0.0
