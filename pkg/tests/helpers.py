"""Shared builders and oracles for tests."""

import math

import numpy as np
import torch

from musasplat.core import CameraPose, GaussianSet, Intrinsics
from musasplat.ffa import FeatureFusionAggregator
from musasplat.splat import RenderSettings


def random_gaussians(n: int, seed: int = 0, dtype=torch.float64, spread: float = 0.6, depth: float = 3.0,
                     log_scale=(-3.0, -1.8), sh_degree: int = 1) -> GaussianSet:
    g = torch.Generator().manual_seed(seed)
    means = (torch.rand(n, 3, generator=g, dtype=dtype) - 0.5) * 2 * spread
    means[:, 2] += depth
    lo, hi = log_scale
    log_scales = lo + (hi - lo) * torch.rand(n, 3, generator=g, dtype=dtype)
    rot = torch.randn(n, 4, generator=g, dtype=dtype)
    rot = rot / rot.norm(dim=-1, keepdim=True)
    k = (sh_degree + 1) ** 2
    sh = torch.randn(n, 3, k, generator=g, dtype=dtype) * 0.5
    logits = torch.randn(n, generator=g, dtype=dtype)
    return GaussianSet(means, logits, log_scales, rot, sh)


def small_camera(size: int = 16):
    intr = Intrinsics(1.2 * size, 1.2 * size, size / 2, size / 2)
    return CameraPose.identity(), intr, RenderSettings(height=size, width=size)


def brute_force_fuse(agg: FeatureFusionAggregator, feats: torch.Tensor) -> np.ndarray:
    """Scaled dot-product cross-attention written as explicit loops in numpy."""
    x = feats.detach().numpy()
    Wq, Wk, Wv = (m.weight.detach().numpy() for m in (agg.to_q, agg.to_k, agg.to_v))
    q, k, val = x @ Wq.T, x @ Wk.T, x @ Wv.T
    views, n, d = q.shape
    attended = np.zeros_like(q)
    for v in range(views):
        keys = np.concatenate([k[j] for j in range(views) if j != v])
        vals = np.concatenate([val[j] for j in range(views) if j != v])
        for i in range(n):
            s = keys @ q[v, i] / math.sqrt(d)
            e = np.exp(s - s.max())
            attended[v, i] = (e / e.sum()) @ vals
    f1, f2 = agg.fusion[0], agg.fusion[2]
    h = np.concatenate([x, attended], axis=-1) @ f1.weight.detach().numpy().T + f1.bias.detach().numpy()
    h = torch.nn.functional.gelu(torch.from_numpy(h)).numpy()
    return x + h @ f2.weight.detach().numpy().T + f2.bias.detach().numpy()
