import math

import numpy as np
import pytest
import torch
from torch import nn

from musasplat.train import (PSNR_CAP, FixedRandomConvPerceptual, LossConfig, NonFiniteLoss, OptimConfig,
                             format_parameter_report, gaussian_window, make_optimizer, parameter_hash,
                             parameter_report, perceptual_module, psnr, rgb_loss, ssim, step, tensor_hash,
                             total_loss, write_parameter_report)


def test_total_loss_constants():
    assert total_loss(0.0, 1.0) == 0.05
    assert total_loss(1.0, 0.0) == 1.0
    assert total_loss(2.0, 4.0, LossConfig(lambda_rgb=0.5, lambda_aug=0.25)) == 2.0


def test_rgb_loss_weights_on_constructed_inputs():
    gen = torch.Generator().manual_seed(0)
    a = torch.rand(16, 16, 3, generator=gen, dtype=torch.float64)
    b = torch.rand(16, 16, 3, generator=gen, dtype=torch.float64)
    mse = ((a - b) ** 2).mean()
    perc = perceptual_module("proxy")(a, b)
    assert perc > 0
    assert torch.allclose(rgb_loss(a, b), 1.0 * mse + 0.2 * perc, rtol=0, atol=1e-15)
    assert torch.allclose(rgb_loss(a, b, LossConfig(perceptual_loss="none")), mse, rtol=0, atol=0)
    assert torch.allclose(rgb_loss(a, b, LossConfig(lambda_lpips=0.0)), mse, rtol=0, atol=0)
    assert rgb_loss(a, a).item() == 0.0
    with pytest.raises(ValueError):
        rgb_loss(a, b[:8])
    with pytest.raises(ValueError):
        LossConfig(perceptual_loss="vgg")
    with pytest.raises(ValueError):
        LossConfig(lambda_aug=-1)


def test_perceptual_proxy_ranks_structure_over_shift():
    """Noise destroys structure and costs more than a same-MSE uniform brightness shift."""
    gen = torch.Generator().manual_seed(1)
    y, x = torch.meshgrid(torch.linspace(0, 1, 32), torch.linspace(0, 1, 32), indexing="ij")
    img = torch.stack([0.5 + 0.3 * torch.sin(8 * x), 0.5 + 0.3 * torch.cos(6 * y), 0.5 * x * y], -1).double()
    noise = torch.randn(img.shape, generator=gen, dtype=torch.float64) * 0.05
    shift = torch.full_like(img, 0.05)
    perc = FixedRandomConvPerceptual()
    assert abs(((noise) ** 2).mean() - (shift ** 2).mean()) < 1e-3
    assert perc(img, img + noise) > 10 * perc(img, img + shift)
    assert perc(img, img + shift) < 1e-20


def _ssim_loop(a: np.ndarray, b: np.ndarray, size=11, sigma=1.5) -> float:
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    w = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    H, W, C = a.shape
    for ch in range(C):
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                pa, pb = a[i:i + size, j:j + size, ch], b[i:i + size, j:j + size, ch]
                mx, my = (w * pa).sum(), (w * pb).sum()
                vx = (w * pa * pa).sum() - mx * mx
                vy = (w * pb * pb).sum() - my * my
                cxy = (w * pa * pb).sum() - mx * my
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(20, 18, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert abs(ssim(torch.from_numpy(a), torch.from_numpy(b)) - _ssim_loop(a, b)) < 1e-10
    assert abs(ssim(torch.from_numpy(a), torch.from_numpy(a)) - 1.0) < 1e-12
    assert abs(gaussian_window().sum().item() - 1.0) < 1e-12


def test_psnr():
    a = torch.zeros(4, 4, 3)
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6
    assert psnr(a, a) == PSNR_CAP


class _Quadratic(nn.Module):
    def __init__(self, init):
        super().__init__()
        self.x = nn.Parameter(torch.tensor(init, dtype=torch.float64))

    def training_loss(self, batch):
        return {"total": ((self.x - batch) ** 2).sum()}


def test_step_clips_gradients():
    model = _Quadratic([100.0, -50.0])
    opt = make_optimizer(model.parameters(), OptimConfig(lr=1e-3))
    rec = step(model, torch.zeros(2, dtype=torch.float64), opt, OptimConfig(clip_norm=0.5))
    assert rec["grad_norm_pre"] > 100
    assert abs(rec["grad_norm_post"] - 0.5) < 1e-6  # torch adds 1e-6 to the norm before dividing
    assert {"total", "step_time_s"} <= set(rec)


def test_zero_lr_leaves_parameters_unchanged():
    model = _Quadratic([1.0, 2.0])
    cfg = OptimConfig(lr=0.0)
    opt = make_optimizer(model.parameters(), cfg)
    before = model.x.detach().clone()
    for _ in range(3):
        step(model, torch.zeros(2, dtype=torch.float64), opt, cfg)
    assert torch.equal(model.x, before)


def test_quadratic_bowl_converges():
    model = _Quadratic([3.0, -2.0, 1.0])
    cfg = OptimConfig(lr=0.05, weight_decay=0.0, clip_norm=10.0)
    opt = make_optimizer(model.parameters(), cfg)
    target = torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64)
    for _ in range(400):
        rec = step(model, target, opt, cfg)
    assert rec["total"] < 1e-6


def test_non_finite_loss_aborts_before_update():
    model = _Quadratic([1.0])
    cfg = OptimConfig(lr=1.0)
    opt = make_optimizer(model.parameters(), cfg)
    with pytest.raises(NonFiniteLoss) as info:
        step(model, torch.tensor([float("nan")], dtype=torch.float64), opt, cfg)
    assert "total" in info.value.diagnostics
    assert model.x.item() == 1.0


def test_optimizer_needs_parameters_and_validates():
    with pytest.raises(ValueError):
        make_optimizer([], OptimConfig())
    with pytest.raises(ValueError):
        OptimConfig(lr=-1.0)


def test_parameter_report(tmp_path):
    model = nn.Sequential(nn.Linear(3, 4), nn.Linear(4, 2))
    model[0].requires_grad_(False)
    rep = parameter_report(model)
    assert rep["total"] == 16 + 10 and rep["trainable"] == 10 and rep["frozen"] == 16
    assert math.isclose(rep["trainable_fraction"], 10 / 26)
    assert rep["modules"]["0"]["frozen"] == 16
    assert "trainable fraction" in format_parameter_report(rep)
    assert write_parameter_report(rep, tmp_path / "p.json").exists()
    h = parameter_hash(model)
    with torch.no_grad():
        model[1].weight.add_(1.0)
    assert parameter_hash(model) == h
    with torch.no_grad():
        model[0].weight.add_(1.0)
    assert parameter_hash(model) != h
    assert tensor_hash({"a": torch.ones(2)}) != tensor_hash({"b": torch.ones(2)})
