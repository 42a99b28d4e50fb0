"""The fp64 finite-difference suite: every op, a MuSA layer, the FFA fuse and the renderer."""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from . import diffcore as dc
from .core import CameraPose, GaussianSet, Intrinsics
from .ffa import FeatureFusionAggregator, FfaConfig
from .musa import MusaConfig, MusaLayer
from .splat import RenderSettings, render_gradient_check

OP_TOL = 1e-4
RENDER_TOL = 1e-3


@dataclass
class GradResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


def _randn(shape, gen):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _randomized(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.3) -> torch.nn.Module:
    # zero-initialized projections would make most parameter gradients trivially zero
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(_randn(p.shape, gen) * scale)
    return module


def op_results(seed: int = 0) -> list[GradResult]:
    gen = torch.Generator().manual_seed(seed)
    out = []
    for name, (fn, shapes) in sorted(dc.OPS.items()):
        inputs = [_randn(s, gen) for s in shapes]
        weight = _randn(fn(*inputs).shape, gen)
        worst = 0.0
        for k in range(len(inputs)):
            def f(x, k=k):
                args = list(inputs)
                args[k] = x
                return (fn(*args) * weight).sum()
            worst = max(worst, dc.finite_difference_check(f, inputs[k]))
        out.append(GradResult(f"op:{name}", worst, OP_TOL))
    return out


def musa_result(seed: int = 0, mini_grid: bool = False) -> GradResult:
    gen = torch.Generator().manual_seed(seed)
    layer = _randomized(MusaLayer(16, MusaConfig(mini_grid_enabled=mini_grid), seed=seed).double(), gen)
    x, w = _randn((2, 12, 16), gen), _randn((2, 12, 16), gen)
    loss = lambda v: (layer(v, 3, 4) * w).sum()
    err = max(dc.finite_difference_check(loss, x),
              dc.check_module_gradients(lambda: loss(x), list(layer.parameters()), max_elems=16, seed=seed))
    return GradResult("musa" + ("+mini-grid" if mini_grid else ""), err, OP_TOL)


def ffa_result(seed: int = 0) -> GradResult:
    gen = torch.Generator().manual_seed(seed)
    agg = FeatureFusionAggregator(16, FfaConfig(), seed=seed).double()
    x, w = _randn((3, 8, 16), gen), _randn((3, 8, 16), gen)
    loss = lambda v: (agg(v) * w).sum()
    err = max(dc.finite_difference_check(loss, x),
              dc.check_module_gradients(lambda: loss(x), list(agg.parameters()), max_elems=16, seed=seed))
    return GradResult("ffa", err, OP_TOL)


def render_results(seed: int = 0, n: int = 10, size: int = 12) -> list[GradResult]:
    gen = torch.Generator().manual_seed(seed)
    means = (torch.rand(n, 3, generator=gen, dtype=torch.float64) - 0.5) * 0.8
    means[:, 2] += 3.0
    g = GaussianSet(means, _randn(n, gen), -2.2 + 0.6 * torch.rand(n, 3, generator=gen, dtype=torch.float64),
                    _randn((n, 4), gen), 0.5 * _randn((n, 3, 4), gen))
    intr = Intrinsics(1.2 * size, 1.2 * size, size / 2, size / 2)
    settings = RenderSettings(height=size, width=size)
    target = torch.rand(size, size, 3, generator=gen, dtype=torch.float64)
    errs = render_gradient_check(g, CameraPose.identity(), intr, settings, target)
    return [GradResult(f"render:{k}", v, RENDER_TOL) for k, v in errs.items()]


def run_suite(seed: int = 0) -> tuple[list[GradResult], float]:
    """All checks and the wall time they took."""
    t0 = time.perf_counter()
    results = op_results(seed) + [musa_result(seed), musa_result(seed, mini_grid=True), ffa_result(seed)]
    results += render_results(seed)
    return results, time.perf_counter() - t0
