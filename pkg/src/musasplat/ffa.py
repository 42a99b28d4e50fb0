"""Single-pass cross-view feature fusion, plus the sequential memory-bank baseline.

Both aggregators map stacked view tokens (V, L, C) to fused tokens of the same
shape and record per-call instrumentation in ``self.stats``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import diffcore as dc
from .core import TokenGrid


@dataclass
class FfaConfig:
    tau: float = 0.1
    lambda_boost: float = 2.0
    attention_dim: int | None = None  # defaults to the token channel dim
    mask_floor: float = 1e-9
    heads: int = 1
    boundary_entropy_weight: float = 0.0

    def __post_init__(self):
        if not self.lambda_boost >= 1.0:
            raise ValueError(f"lambda_boost must be >= 1, got {self.lambda_boost}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if not self.mask_floor > 0:
            raise ValueError("mask_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _linear(fan_in: int, fan_out: int, gen: torch.Generator, bias: bool = True) -> nn.Linear:
    layer = nn.Linear(fan_in, fan_out, bias=bias)
    with torch.no_grad():
        layer.weight.copy_(torch.randn(fan_out, fan_in, generator=gen) * 0.02)
        if bias:
            layer.bias.zero_()
    return layer


def other_view_index(views: int) -> torch.Tensor:
    """(V, V-1) table: row v lists every view except v, in order."""
    return torch.tensor([[j for j in range(views) if j != v] for v in range(views)], dtype=torch.long)


def masked_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, log_mask: torch.Tensor,
                           heads: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Each view's queries attend to all tokens of the other views.

    q, k, v: (V, L, d); log_mask: (V, L) additive bias per key token.
    Returns attended values (V, L, d) and attention weights (V, heads, L, (V-1) L).
    """
    views, n, d = q.shape
    idx = other_view_index(views)
    k_o = k[idx].reshape(views, (views - 1) * n, d)
    v_o = v[idx].reshape(views, (views - 1) * n, d)
    bias = log_mask[idx].reshape(views, 1, 1, (views - 1) * n)
    dh = d // heads
    qh = q.reshape(views, n, heads, dh).transpose(1, 2)
    kh = k_o.reshape(views, -1, heads, dh).transpose(1, 2)
    vh = v_o.reshape(views, -1, heads, dh).transpose(1, 2)
    att = dc.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh) + bias, axis=-1)
    out = (att @ vh).transpose(1, 2).reshape(views, n, d)
    return out, att


class FeatureFusionAggregator(nn.Module):
    def __init__(self, dim: int, cfg: FfaConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or FfaConfig()
        self.cfg = cfg
        self.dim = dim
        d = cfg.attention_dim or dim
        if d % cfg.heads:
            raise ValueError(f"attention dim {d} not divisible by heads {cfg.heads}")
        self.attn_dim = d
        gen = torch.Generator().manual_seed(seed)
        self.quality = _linear(dim, 1, gen, bias=False)
        self.boundary = nn.Sequential(_linear(dim, dim // 2, gen), nn.GELU(), _linear(dim // 2, 1, gen))
        self.to_q = _linear(dim, d, gen, bias=False)
        self.to_k = _linear(dim, d, gen, bias=False)
        self.to_v = _linear(dim, d, gen, bias=False)
        self.fusion = nn.Sequential(_linear(dim + d, dim, gen), nn.GELU(), _linear(dim, dim, gen))
        self.stats = {"invocations": 0, "peak_retained_tokens": 0}
        self.total_invocations = 0
        self.last = {}

    def quality_scores(self, feats: torch.Tensor) -> torch.Tensor:
        """(V, L, C) -> (V, L) per-token confidence in (0, 1)."""
        return dc.sigmoid(self.quality(feats)).squeeze(-1)

    def boundary_probability(self, feats: torch.Tensor) -> torch.Tensor:
        pooled = dc.mean(feats, axis=1)
        return dc.sigmoid(self.boundary(pooled)).squeeze(-1)

    def boundary_mask(self, feats: torch.Tensor) -> torch.Tensor:
        """(V,) hard indicator, 1 iff detector probability > 0.5; no gradient flows through it."""
        return (self.boundary_probability(feats) > 0.5).to(feats.dtype).detach()

    def token_weights(self, q: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        boost = 1.0 + (self.cfg.lambda_boost - 1.0) * b
        return q * boost.unsqueeze(-1)

    def attention_mask(self, q: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        eps = self.cfg.mask_floor
        kept = torch.clamp(w, min=eps)
        return torch.where(q < self.cfg.tau, torch.full_like(w, eps), kept)

    def forward(self, feats: torch.Tensor, quality: torch.Tensor | None = None,
                boundary: torch.Tensor | None = None) -> torch.Tensor:
        """Fuse (V, L, C) tokens in one pass. ``quality``/``boundary`` override the estimators."""
        views = feats.shape[0]
        if views < 2:
            raise ValueError("aggregation requires multiple views")
        self.total_invocations += 1
        self.stats = {"invocations": 1, "peak_retained_tokens": 0, "working_set_tokens": views * feats.shape[1]}

        q = self.quality_scores(feats) if quality is None else quality
        p_boundary = self.boundary_probability(feats)
        b = (p_boundary > 0.5).to(feats.dtype).detach() if boundary is None else boundary.to(feats.dtype)
        w = self.token_weights(q, b)
        mask = self.attention_mask(q, w)
        attended, att = masked_cross_attention(self.to_q(feats), self.to_k(feats), self.to_v(feats),
                                               dc.log(mask), self.cfg.heads)
        fused = feats + self.fusion(dc.concat([feats, attended], axis=-1))

        pe = p_boundary.clamp(1e-6, 1 - 1e-6)
        entropy = -(pe * pe.log() + (1 - pe) * (1 - pe).log()).mean()
        self.last = {"quality": q, "boundary": b, "weights": w, "mask": mask, "attention": att,
                     "aux_loss": self.cfg.boundary_entropy_weight * entropy}
        return fused

    def aux_loss(self) -> torch.Tensor:
        return self.last.get("aux_loss", torch.zeros(()))


class MemoryBankAggregator(nn.Module):
    """Sequential pairwise fusion with a persistent token memory (baseline).

    Step 1 fuses views 1 and 2 with each other; every later view attends to the
    memory of all previously fused views and is then written into it. One step
    is one fusion invocation, so V views cost V - 1 invocations.
    """

    def __init__(self, dim: int, cfg: FfaConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or FfaConfig()
        self.cfg = cfg
        d = cfg.attention_dim or dim
        gen = torch.Generator().manual_seed(seed)
        self.to_q = _linear(dim, d, gen, bias=False)
        self.to_k = _linear(dim, d, gen, bias=False)
        self.to_v = _linear(dim, d, gen, bias=False)
        self.fusion = nn.Sequential(_linear(dim + d, dim, gen), nn.GELU(), _linear(dim, dim, gen))
        self.memory_update = _linear(dim, dim, gen)
        self.stats = {"invocations": 0, "peak_retained_tokens": 0}
        self.total_invocations = 0

    def _count_step(self) -> None:
        self.stats["invocations"] += 1
        self.total_invocations += 1

    def _fuse(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        q, k, v = self.to_q(x), self.to_k(memory), self.to_v(memory)
        dh = q.shape[-1] // self.cfg.heads
        att = dc.softmax(q.reshape(-1, self.cfg.heads, dh).transpose(0, 1)
                         @ k.reshape(-1, self.cfg.heads, dh).permute(1, 2, 0) / math.sqrt(dh), axis=-1)
        read = (att @ v.reshape(-1, self.cfg.heads, dh).transpose(0, 1)).transpose(0, 1).reshape(q.shape)
        return x + self.fusion(torch.cat([x, read], dim=-1))

    def _write(self, memory: list[torch.Tensor], fused: torch.Tensor) -> None:
        memory.append(fused + self.memory_update(fused))
        n = sum(m.shape[0] for m in memory)
        self.stats["peak_retained_tokens"] = max(self.stats["peak_retained_tokens"], n)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        views, n, _ = feats.shape
        if views < 2:
            raise ValueError("aggregation requires multiple views")
        self.stats = {"invocations": 0, "peak_retained_tokens": 0, "working_set_tokens": 0}
        memory: list[torch.Tensor] = []
        self._count_step()
        outputs = [self._fuse(feats[0], feats[1]), self._fuse(feats[1], feats[0])]
        for f in outputs:
            self._write(memory, f)
        for v in range(2, views):
            self._count_step()
            fused = self._fuse(feats[v], torch.cat(memory))
            outputs.append(fused)
            self._write(memory, fused)
        self.stats["working_set_tokens"] = self.stats["peak_retained_tokens"] + n
        return torch.stack(outputs)

    def aux_loss(self) -> torch.Tensor:
        return torch.zeros(())


class IdentityAggregator(nn.Module):
    """The "w/o aggregator" ablation: views pass straight to the decoder."""

    def __init__(self):
        super().__init__()
        self.stats = {"invocations": 0, "peak_retained_tokens": 0, "working_set_tokens": 0}
        self.total_invocations = 0

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        self.stats = {"invocations": 0, "peak_retained_tokens": 0, "working_set_tokens": feats.shape[0] * feats.shape[1]}
        return feats

    def aux_loss(self) -> torch.Tensor:
        return torch.zeros(())


def quality_scores(feats: list[TokenGrid], agg: FeatureFusionAggregator) -> torch.Tensor:
    return agg.quality_scores(torch.stack([g.tokens for g in feats]))


def boundary_mask(feats: list[TokenGrid], agg: FeatureFusionAggregator) -> torch.Tensor:
    return agg.boundary_mask(torch.stack([g.tokens for g in feats]))


def fuse(feats: list[TokenGrid], agg: FeatureFusionAggregator) -> list[TokenGrid]:
    if len(feats) < 2:
        raise ValueError("aggregation requires multiple views")
    out = agg(torch.stack([g.tokens for g in feats]))
    return [TokenGrid(g.view_index, out[i], g.h, g.w) for i, g in enumerate(feats)]


def memory_bank_baseline(feats: list[TokenGrid], bank: MemoryBankAggregator) -> list[TokenGrid]:
    out = bank(torch.stack([g.tokens for g in feats]))
    return [TokenGrid(g.view_index, out[i], g.h, g.w) for i, g in enumerate(feats)]
