"""Multi-scale adapter: tokens -> patch grid -> averaged depthwise convs -> token residual."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import diffcore as dc
from .core import TokenGrid


@dataclass
class MusaConfig:
    reduction_ratio: int = 4
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    mini_grid_enabled: bool = False
    mini_grid_p: int = 4
    # "output": only the up-projection starts at zero; "all": every weight does.
    zero_init: str = "output"
    init_std: float = 0.02

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd, got {self.kernel_sizes}")
        if self.zero_init not in ("output", "all"):
            raise ValueError(f"zero_init must be 'output' or 'all', got {self.zero_init!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d


def musa_parameter_count(dim: int, cfg: MusaConfig) -> int:
    """Closed form: projections, depthwise filters (+bias each), pointwise conv (+bias)."""
    c = dim // cfg.reduction_ratio
    n = dim * c + c * sum(k * k for k in cfg.kernel_sizes) + c * c + c * dim
    n += c * len(cfg.kernel_sizes) + c
    if cfg.mini_grid_enabled:
        n += mini_grid_parameter_count(dim, cfg.mini_grid_p)
    return n


def mini_grid_parameter_count(dim: int, p: int) -> int:
    c = dim // (p * p)
    return c * 9 + c + c * dim


def _normal(shape, std: float, gen: torch.Generator, zero: bool) -> nn.Parameter:
    if zero:
        return nn.Parameter(torch.zeros(shape))
    return nn.Parameter(torch.randn(shape, generator=gen) * std)


class MiniGridBranch(nn.Module):
    """Intra-patch branch: each token viewed as a p x p map, one 3x3 depthwise conv, pooled back."""

    def __init__(self, dim: int, p: int = 4, seed: int = 0, std: float = 0.02):
        super().__init__()
        if dim % (p * p):
            raise ValueError(f"channel dim {dim} not divisible by p^2 = {p * p}")
        self.p = p
        self.c = dim // (p * p)
        gen = torch.Generator().manual_seed(seed)
        self.dw_weight = _normal((self.c, 3, 3), std, gen, False)
        self.dw_bias = nn.Parameter(torch.zeros(self.c))
        self.up = nn.Parameter(torch.zeros(self.c, dim))

    def token_maps(self, x: torch.Tensor) -> torch.Tensor:
        """(..., C) tokens -> (M, c, p, p) per-token feature maps."""
        p, c = self.p, self.c
        return x.reshape(-1, p, p, c).permute(0, 3, 1, 2)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        maps = dc.conv2d_depthwise(self.token_maps(x), self.dw_weight, self.dw_bias)
        pooled = maps.mean(dim=(-2, -1))
        return (pooled @ self.up).reshape(x.shape)


class MusaLayer(nn.Module):
    def __init__(self, dim: int, cfg: MusaConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or MusaConfig()
        if dim % cfg.reduction_ratio:
            raise ValueError(f"channel dim {dim} not divisible by reduction ratio {cfg.reduction_ratio}")
        self.cfg = cfg
        self.dim = dim
        self.reduced = dim // cfg.reduction_ratio
        gen = torch.Generator().manual_seed(seed)
        all_zero = cfg.zero_init == "all"
        c = self.reduced
        self.down = _normal((dim, c), cfg.init_std, gen, all_zero)
        self.dw_weights = nn.ParameterList(
            [_normal((c, k, k), cfg.init_std, gen, all_zero) for k in cfg.kernel_sizes])
        self.dw_biases = nn.ParameterList([nn.Parameter(torch.zeros(c)) for _ in cfg.kernel_sizes])
        self.pw_weight = _normal((c, c), cfg.init_std, gen, all_zero)
        self.pw_bias = nn.Parameter(torch.zeros(c))
        self.up = nn.Parameter(torch.zeros(c, dim))
        self.mini_grid = (MiniGridBranch(dim, cfg.mini_grid_p, seed=seed + 7919, std=cfg.init_std)
                          if cfg.mini_grid_enabled else None)

    def reduced_grid(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """(V, L, C) -> (V, C', h, w): the down-projected tokens laid out on the patch grid."""
        v, n, _ = x.shape
        if h * w != n:
            raise ValueError(f"grid {h}x{w} does not match token count {n}")
        y = dc.matmul(x, self.down)
        return y.transpose(1, 2).reshape(v, self.reduced, h, w)

    def residual(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """The adapter output X-hat for (V, L, C) tokens on an h x w grid."""
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected channel dim {self.dim}, got {x.shape[-1]}")
        y = self.reduced_grid(x, h, w)
        z = sum(dc.conv2d_depthwise(y, wk, bk) for wk, bk in zip(self.dw_weights, self.dw_biases))
        z = z / len(self.dw_weights)
        a = dc.gelu(dc.conv2d_pointwise(z, self.pw_weight, self.pw_bias))
        out = dc.matmul(a.flatten(2).transpose(1, 2), self.up)
        if self.mini_grid is not None:
            out = out + self.mini_grid.residual(x)
        return out

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return x + self.residual(x, h, w)


def musa_forward(layer: MusaLayer, grid: TokenGrid) -> TokenGrid:
    out = layer(grid.tokens.unsqueeze(0), grid.h, grid.w)[0]
    return TokenGrid(grid.view_index, out, grid.h, grid.w)


def mini_grid_forward(branch: MiniGridBranch, grid: TokenGrid) -> TokenGrid:
    return TokenGrid(grid.view_index, grid.tokens + branch.residual(grid.tokens), grid.h, grid.w)
