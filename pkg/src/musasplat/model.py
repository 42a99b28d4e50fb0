"""Full network: frozen ViT + adapters, cross-view aggregator, point head and Gaussian head."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .core import GaussianSet, Intrinsics
from .ffa import FeatureFusionAggregator, FfaConfig, IdentityAggregator, MemoryBankAggregator
from .heads import POINT_CHANNELS, GaussianHead, Geometry, HeadConfig, PointHead, pixel_footprint
from .musa import MusaConfig, musa_parameter_count
from .vit import Decoder, Encoder, ViTConfig, attach_adapters

AGGREGATIONS = ("ffa", "memory-bank", "none")
FREEZE_POLICIES = ("default", "none", "all")


@dataclass
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    musa: MusaConfig = field(default_factory=MusaConfig)
    ffa: FfaConfig = field(default_factory=FfaConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    use_adapters: bool = True
    aggregation: str = "ffa"
    seed: int = 0

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")

    def to_dict(self) -> dict:
        return {"vit": self.vit.to_dict(), "musa": self.musa.to_dict(), "ffa": self.ffa.to_dict(),
                "head": self.head.to_dict(), "use_adapters": self.use_adapters,
                "aggregation": self.aggregation, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(vit=ViTConfig(**d.pop("vit", {})), musa=MusaConfig(**d.pop("musa", {})),
                   ffa=FfaConfig(**d.pop("ffa", {})), head=HeadConfig(**d.pop("head", {})), **d)


class MuSASplat(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        # the backbone draws from the global RNG; fork it so every variant gets the same weights
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.encoder = Encoder(cfg.vit)
            self.decoder = Decoder(cfg.vit)
        dim, patch = cfg.vit.embed_dim, cfg.vit.patch_size
        if cfg.use_adapters:
            attach_adapters(self.encoder.blocks, dim, cfg.musa, seed=cfg.seed + 101)
            if cfg.vit.adapters_in_decoder:
                attach_adapters(self.decoder.blocks, dim, cfg.musa, seed=cfg.seed + 202)
        if cfg.aggregation == "ffa":
            self.aggregator = FeatureFusionAggregator(dim, cfg.ffa, seed=cfg.seed + 303)
        elif cfg.aggregation == "memory-bank":
            self.aggregator = MemoryBankAggregator(dim, cfg.ffa, seed=cfg.seed + 303)
        else:
            self.aggregator = IdentityAggregator()
        self.point_head = PointHead(dim, patch, seed=cfg.seed + 404)
        self.gaussian_head = GaussianHead(dim, patch, cfg.head, seed=cfg.seed + 505)
        self.apply_freeze("default")

    # -- parameter bookkeeping ---------------------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups: dict[str, list[nn.Parameter]] = {"encoder": [], "decoder": [], "adapters": []}
        for prefix, module in (("encoder", self.encoder), ("decoder", self.decoder)):
            for name, p in module.named_parameters():
                groups["adapters" if ".adapter." in name else prefix].append(p)
        groups["aggregator"] = list(self.aggregator.parameters())
        groups["point_head"] = list(self.point_head.parameters())
        groups["gaussian_head"] = list(self.gaussian_head.parameters())
        return groups

    def apply_freeze(self, policy: str) -> None:
        """"default": backbone frozen, adapters/aggregator/heads trainable; "none"/"all" as named."""
        if policy not in FREEZE_POLICIES:
            raise ValueError(f"freeze policy must be one of {FREEZE_POLICIES}, got {policy!r}")
        for name, params in self.parameter_groups().items():
            if policy == "none":
                trainable = True
            elif policy == "all":
                trainable = False
            else:
                trainable = name not in ("encoder", "decoder")
            for p in params:
                p.requires_grad_(trainable)

    def set_trainable(self, groups: tuple[str, ...]) -> None:
        for name, params in self.parameter_groups().items():
            for p in params:
                p.requires_grad_(name in groups)

    # -- forward pieces ----------------------------------------------------

    def backbone_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """The fixed g_phi trunk: no adapters, no aggregator. (V, H, W, 3) -> (V, L, C)."""
        return self.decoder(self.encoder(images, use_adapters=False), use_adapters=False)

    def geometry(self, images: torch.Tensor, intr: Intrinsics, tokens: torch.Tensor | None = None) -> Geometry:
        if images.shape[0] < 2:
            raise ValueError("the point head needs at least two views")
        tokens = self.backbone_tokens(images) if tokens is None else tokens
        h, w = self.cfg.vit.grid
        return self.point_head.geometry(tokens, h, w, intr)

    def gaussian_tokens(self, images: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(images, use_adapters=True)
        if feats.shape[0] > 1:
            feats = self.aggregator(feats)
        return self.decoder(feats, use_adapters=True)

    def gaussians(self, images: torch.Tensor, base_means: torch.Tensor, depth: torch.Tensor,
                  intr: Intrinsics, valid: torch.Tensor | None = None) -> GaussianSet:
        """Pixel-aligned Gaussians for (V, H, W, 3) images whose per-pixel points are ``base_means``."""
        tokens = self.gaussian_tokens(images)
        h, w = self.cfg.vit.grid
        return self.gaussian_head(tokens, images, h, w, base_means, pixel_footprint(depth, intr), valid)

    def aux_loss(self) -> torch.Tensor:
        return self.aggregator.aux_loss()


def closed_form_counts(cfg: ModelConfig) -> dict[str, int]:
    """Parameter counts per module written out from the layer shapes."""
    v = cfg.vit
    C, P, r = v.embed_dim, v.patch_size, v.mlp_ratio
    L = v.grid[0] * v.grid[1]
    linear = lambda i, o, bias=True: i * o + (o if bias else 0)
    ln = 2 * C
    mlp = linear(C, r * C) + linear(r * C, C)
    self_attn = linear(C, 3 * C) + linear(C, C)
    cross_attn = linear(C, C) + linear(C, 2 * C) + linear(C, C)
    enc_block = 2 * ln + self_attn + mlp
    dec_block = 4 * ln + self_attn + cross_attn + mlp
    counts = {
        "encoder": linear(3 * P * P, C) + L * C + v.encoder_blocks * enc_block + ln,
        "decoder": linear(C, C) + v.decoder_blocks * dec_block + ln,
    }
    per_adapter = musa_parameter_count(C, cfg.musa)
    n_adapters = (v.encoder_blocks + (v.decoder_blocks if v.adapters_in_decoder else 0)) if cfg.use_adapters else 0
    counts["adapters"] = n_adapters * per_adapter
    d = cfg.ffa.attention_dim or C
    fusion = linear(C + d, C) + linear(C, C)
    if cfg.aggregation == "ffa":
        counts["aggregator"] = C + linear(C, C // 2) + linear(C // 2, 1) + 3 * C * d + fusion
    elif cfg.aggregation == "memory-bank":
        counts["aggregator"] = 3 * C * d + fusion + linear(C, C)
    else:
        counts["aggregator"] = 0
    counts["point_head"] = linear(C, P * P * POINT_CHANNELS)
    hidden = cfg.head.hidden_dim or 2 * C
    counts["gaussian_head"] = (linear(C, hidden) + linear(hidden, P * P * cfg.head.pixel_features)
                               + linear(cfg.head.pixel_features + 3, cfg.head.raw_channels))
    return counts
