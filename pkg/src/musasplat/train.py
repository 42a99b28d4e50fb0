"""Losses, image metrics, the optimizer step, and parameter accounting."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class LossConfig:
    lambda_rgb: float = 1.0
    lambda_aug: float = 0.05
    lambda_mse: float = 1.0
    lambda_lpips: float = 0.2
    perceptual_loss: str = "proxy"  # "none" | "proxy"

    def __post_init__(self):
        for k in ("lambda_rgb", "lambda_aug", "lambda_mse", "lambda_lpips"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"{k} must be >= 0, got {getattr(self, k)}")
        if self.perceptual_loss not in PERCEPTUAL_LOSSES:
            raise ValueError(f"unknown perceptual loss {self.perceptual_loss!r}; "
                             f"choose from {sorted(PERCEPTUAL_LOSSES)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimConfig:
    lr: float = 5e-5
    weight_decay: float = 0.05
    clip_norm: float = 0.5
    batch_size: int = 4
    iterations: int = 2000

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# perceptual term
# --------------------------------------------------------------------------

class FixedRandomConvPerceptual(nn.Module):
    """Feature-space MSE under seeded random filters that are never trained.

    First-layer filters are zero-mean and unit-norm, so a constant color shift
    produces no response while pixel-level structure does.
    """

    def __init__(self, seed: int = 0, channels: tuple[int, int] = (16, 16), kernel: int = 5):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        w1 = torch.randn(channels[0], 3, kernel, kernel, generator=gen, dtype=torch.float64)
        w1 = w1 - w1.mean(dim=(1, 2, 3), keepdim=True)
        w1 = w1 / w1.flatten(1).norm(dim=1)[:, None, None, None]
        w2 = torch.randn(channels[1], channels[0], 3, 3, generator=gen, dtype=torch.float64)
        w2 = w2 / w2.flatten(1).norm(dim=1)[:, None, None, None]
        self.register_buffer("w1", w1)
        self.register_buffer("w2", w2)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img.permute(2, 0, 1).unsqueeze(0)
        f1 = F.conv2d(x, self.w1.to(x.dtype))
        f2 = F.conv2d(F.relu(f1), self.w2.to(x.dtype))
        return [f1, f2]

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa, fb = self.features(a), self.features(b)
        return sum(F.mse_loss(x, y) for x, y in zip(fa, fb)) / len(fa)


class _NoPerceptual(nn.Module):
    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return torch.zeros((), dtype=a.dtype)


PERCEPTUAL_LOSSES: dict[str, Callable[[], nn.Module]] = {
    "none": _NoPerceptual,
    "proxy": FixedRandomConvPerceptual,
}

_perceptual_cache: dict[str, nn.Module] = {}


def perceptual_module(name: str) -> nn.Module:
    if name not in _perceptual_cache:
        _perceptual_cache[name] = PERCEPTUAL_LOSSES[name]()
    return _perceptual_cache[name]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def rgb_loss(render: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    _check_pair(render, target, "rgb_loss")
    target = target.to(render.dtype)
    loss = cfg.lambda_mse * F.mse_loss(render, target)
    if cfg.perceptual_loss != "none" and cfg.lambda_lpips > 0:
        loss = loss + cfg.lambda_lpips * perceptual_module(cfg.perceptual_loss)(render, target)
    return loss


def total_loss(rgb, aug, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    return cfg.lambda_rgb * rgb + cfg.lambda_aug * aug


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    _check_pair(a, b, "psnr")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions and channels, for (H, W, 3) images in [0, 1]."""
    _check_pair(a, b, "ssim")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    w = gaussian_window(window, sigma)[None, None]
    x = a.double().permute(2, 0, 1).unsqueeze(1)  # channels as batch
    y = b.double().permute(2, 0, 1).unsqueeze(1)
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x ** 2
    syy = F.conv2d(y * y, w) - mu_y ** 2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

class NonFiniteLoss(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(params, cfg: OptimConfig) -> torch.optim.AdamW:
    params = list(params)
    if not params:
        raise ValueError("no trainable parameters")
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def grad_norm(params) -> float:
    grads = [p.grad.detach().double().flatten() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.cat(grads).norm())


def step(model: nn.Module, batch, optimizer: torch.optim.Optimizer, cfg: OptimConfig) -> dict:
    """One AdamW update on ``model.training_loss(batch)``, which returns a dict holding "total".

    Gradients are cleared first; a non-finite loss aborts before any parameter moves.
    """
    start = time.perf_counter()
    optimizer.zero_grad(set_to_none=True)
    losses = model.training_loss(batch)
    total = losses["total"]
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss {total.item()}",
                            {k: float(v.detach()) for k, v in losses.items() if torch.is_tensor(v) and v.numel() == 1})
    total.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    pre = float(torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm))
    post = grad_norm(params)
    if not math.isfinite(pre):
        optimizer.zero_grad(set_to_none=True)
        raise NonFiniteLoss("non-finite gradient norm", {"grad_norm": pre})
    optimizer.step()
    record = {k: float(v.detach()) for k, v in losses.items() if torch.is_tensor(v) and v.numel() == 1}
    record.update(grad_norm_pre=pre, grad_norm_post=post, step_time_s=time.perf_counter() - start)
    return record


# --------------------------------------------------------------------------
# parameter accounting
# --------------------------------------------------------------------------

def _count(params) -> int:
    return sum(p.numel() for p in params)


def parameter_report(model: nn.Module) -> dict:
    """Totals plus a per-module breakdown. Modules may define ``parameter_groups()``."""
    if hasattr(model, "parameter_groups"):
        groups = model.parameter_groups()
    else:
        groups = {name: list(m.parameters()) for name, m in model.named_children()}
    modules = {}
    for name, params in groups.items():
        modules[name] = {"total": _count(params), "trainable": _count(p for p in params if p.requires_grad)}
        modules[name]["frozen"] = modules[name]["total"] - modules[name]["trainable"]
    total = _count(model.parameters())
    trainable = _count(p for p in model.parameters() if p.requires_grad)
    return {"total": total, "trainable": trainable, "frozen": total - trainable,
            "trainable_fraction": trainable / total if total else 0.0, "modules": modules}


def write_parameter_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path


def format_parameter_report(report: dict) -> str:
    lines = [f"{'module':<16}{'total':>10}{'trainable':>11}{'frozen':>10}"]
    for name, m in report["modules"].items():
        lines.append(f"{name:<16}{m['total']:>10}{m['trainable']:>11}{m['frozen']:>10}")
    lines.append(f"{'all':<16}{report['total']:>10}{report['trainable']:>11}{report['frozen']:>10}")
    lines.append(f"trainable fraction {report['trainable_fraction']:.4f}")
    return "\n".join(lines)


def tensor_hash(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def parameter_hash(model: nn.Module, frozen_only: bool = True) -> str:
    return tensor_hash({n: p for n, p in model.named_parameters() if not (frozen_only and p.requires_grad)})
