"""Small ViT encoder / cross-view decoder with per-block adapter slots."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .core import TokenGrid, check_image
from .musa import MusaConfig, MusaLayer


@dataclass
class ViTConfig:
    patch_size: int = 8
    embed_dim: int = 64
    encoder_blocks: int = 4
    decoder_blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    image_size: tuple[int, int] = (64, 64)
    adapters_in_decoder: bool = False

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if any(s % self.patch_size for s in self.image_size):
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def _init_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.trunc_normal_(layer.weight, std=0.02)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return _merge_heads(att @ v)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = _init_linear(nn.Linear(dim, 3 * dim))
        self.proj = _init_linear(nn.Linear(dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(attention(q, k, v, self.heads))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = _init_linear(nn.Linear(dim, dim))
        self.kv = _init_linear(nn.Linear(dim, 2 * dim))
        self.proj = _init_linear(nn.Linear(dim, dim))

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        k, v = self.kv(context).chunk(2, dim=-1)
        return self.proj(attention(self.q(x), k, v, self.heads))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = _init_linear(nn.Linear(dim, dim * ratio))
        self.act = nn.GELU()
        self.fc2 = _init_linear(nn.Linear(dim * ratio, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block; the adapter runs parallel to the MLP on the same input."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)
        self.adapter: MusaLayer | None = None

    def forward(self, x: torch.Tensor, h: int, w: int, use_adapter: bool = True) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        y = self.norm2(x)
        out = x + self.mlp(y)
        if use_adapter and self.adapter is not None:
            out = out + self.adapter.residual(y, h, w)
        return out


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.norm_ctx = nn.LayerNorm(dim, eps=1e-6)
        self.cross = CrossAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)
        self.adapter: MusaLayer | None = None

    def forward(self, x: torch.Tensor, h: int, w: int, use_adapter: bool = True) -> torch.Tensor:
        views, n, c = x.shape
        x = x + self.attn(self.norm1(x))
        if views > 1:
            ctx = self.norm_ctx(x)
            # view v attends to the concatenated tokens of every other view
            others = torch.stack([torch.cat([ctx[j] for j in range(views) if j != v]) for v in range(views)])
            x = x + self.cross(self.norm2(x), others)
        y = self.norm3(x)
        out = x + self.mlp(y)
        if use_adapter and self.adapter is not None:
            out = out + self.adapter.residual(y, h, w)
        return out


class PatchEmbed(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.grid = cfg.grid
        self.proj = _init_linear(nn.Linear(3 * cfg.patch_size ** 2, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.randn(self.grid[0] * self.grid[1], cfg.embed_dim) * 0.02)

    def patches(self, images: torch.Tensor) -> torch.Tensor:
        """(V, H, W, 3) -> (V, L, P*P*3), row-major over the patch grid, (dy, dx, rgb) inside a patch."""
        v, H, W, _ = images.shape
        p = self.patch_size
        x = images.reshape(v, H // p, p, W // p, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(v, (H // p) * (W // p), p * p * 3)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        for img in images:
            check_image(img, self.patch_size)
        h, w = images.shape[1] // self.patch_size, images.shape[2] // self.patch_size
        if (h, w) != self.grid:
            raise ValueError(f"patch grid {h}x{w} does not match the configured {self.grid[0]}x{self.grid[1]}")
        return self.proj(self.patches(images)) + self.pos_embed


class Encoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.blocks = nn.ModuleList(
            [EncoderBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_blocks)])
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6)

    def forward(self, images: torch.Tensor, use_adapters: bool = True) -> torch.Tensor:
        """(V, H, W, 3) -> (V, L, C); views are a batch and never mix here."""
        h, w = self.cfg.grid
        x = self.patch_embed(images)
        for blk in self.blocks:
            x = blk(x, h, w, use_adapters)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = _init_linear(nn.Linear(cfg.embed_dim, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            [DecoderBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.decoder_blocks)])
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6)

    def forward(self, x: torch.Tensor, use_adapters: bool = True) -> torch.Tensor:
        h, w = self.cfg.grid
        x = self.embed(x)
        for blk in self.blocks:
            x = blk(x, h, w, use_adapters)
        return self.norm(x)


def attach_adapters(blocks: nn.ModuleList, dim: int, cfg: MusaConfig, seed: int) -> None:
    for i, blk in enumerate(blocks):
        blk.adapter = MusaLayer(dim, cfg, seed=seed + 1000 * i)


def detach_adapters(blocks: nn.ModuleList) -> None:
    for blk in blocks:
        blk.adapter = None


def to_token_grids(x: torch.Tensor, h: int, w: int) -> list[TokenGrid]:
    return [TokenGrid(i, x[i], h, w) for i in range(x.shape[0])]


def from_token_grids(grids: list[TokenGrid]) -> tuple[torch.Tensor, int, int]:
    if not grids:
        raise ValueError("need at least one token grid")
    shapes = {(g.h, g.w, g.channel_dim) for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"token grids disagree in shape: {sorted(shapes)}")
    return torch.stack([g.tokens for g in grids]), grids[0].h, grids[0].w


def patchify(image: torch.Tensor, embed: PatchEmbed) -> TokenGrid:
    check_image(image, embed.patch_size)
    tokens = embed(image.unsqueeze(0))[0]
    return TokenGrid(0, tokens, image.shape[0] // embed.patch_size, image.shape[1] // embed.patch_size)


def encode(encoder: Encoder, views: list[torch.Tensor], use_adapters: bool = True) -> list[TokenGrid]:
    if not views:
        raise ValueError("encode needs at least one view")
    if len({tuple(v.shape) for v in views}) != 1:
        raise ValueError(f"all views must share a resolution, got {[tuple(v.shape) for v in views]}")
    x = encoder(torch.stack(views), use_adapters=use_adapters)
    return to_token_grids(x, *encoder.cfg.grid)


def decode(decoder: Decoder, fused: list[TokenGrid]) -> list[TokenGrid]:
    x, h, w = from_token_grids(fused)
    return to_token_grids(decoder(x), h, w)
