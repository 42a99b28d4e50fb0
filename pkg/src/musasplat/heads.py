"""Point head (pointmaps + relative poses) and Gaussian head (pixel-aligned primitives)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import CameraPose, GaussianSet, Intrinsics, Pointmap, TokenGrid, rgb_to_sh_dc


@dataclass
class HeadConfig:
    hidden_dim: int | None = None  # defaults to 2 * embed_dim
    sh_degree: int = 1
    log_scale_range: tuple[float, float] = (-8.0, 2.0)
    pixel_features: int = 4
    offset_range: float = 0.05

    def __post_init__(self):
        self.log_scale_range = tuple(float(v) for v in self.log_scale_range)
        lo, hi = self.log_scale_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"bad log_scale_range {self.log_scale_range}")
        if self.sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")

    @property
    def sh_coeffs(self) -> int:
        return (self.sh_degree + 1) ** 2

    @property
    def raw_channels(self) -> int:
        # offset 3, opacity 1, log-scale 3, rotation 4, SH 3 * K
        return 11 + 3 * self.sh_coeffs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["log_scale_range"] = list(self.log_scale_range)
        return d


POINT_CHANNELS = 5  # canonical xyz, log-depth, confidence


def tokens_to_pixels(x: torch.Tensor, h: int, w: int, patch: int) -> torch.Tensor:
    """(V, L, P*P*c) per-token outputs -> (V, h*P, w*P, c) images, each token owning its patch."""
    v, n, d = x.shape
    c = d // (patch * patch)
    x = x.reshape(v, h, w, patch, patch, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(v, h * patch, w * patch, c)


def procrustes(src: torch.Tensor, dst: torch.Tensor, weights: torch.Tensor | None = None,
               rank_tol: float = 1e-9) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Weighted rigid fit dst ~= R @ src + t for (M, 3) point sets.

    Returns (R, t, degenerate). When the centered source set spans fewer than
    two dimensions the rotation is undetermined and the identity is returned.
    """
    src = src.reshape(-1, 3).to(torch.float64)
    dst = dst.reshape(-1, 3).to(torch.float64)
    w = torch.ones(src.shape[0], dtype=torch.float64) if weights is None else weights.reshape(-1).to(torch.float64)
    w = w / w.sum()
    mu_s = (w[:, None] * src).sum(0)
    mu_d = (w[:, None] * dst).sum(0)
    a = src - mu_s
    b = dst - mu_d
    cov = (w[:, None] * b).T @ a
    spread = torch.linalg.svdvals((w.sqrt()[:, None] * a))
    if spread[0] <= 0 or spread[1] <= rank_tol * spread[0]:
        return torch.eye(3, dtype=torch.float64), mu_d - mu_s, True
    U, _, Vh = torch.linalg.svd(cov)
    d = torch.sign(torch.det(U @ Vh))
    D = torch.diag(torch.tensor([1.0, 1.0, float(d)], dtype=torch.float64))
    R = U @ D @ Vh
    return R, mu_d - R @ mu_s, False


@dataclass
class Geometry:
    """Point-head output for V views, all expressed in view 1's camera frame."""

    pointmaps: list[Pointmap]  # pixel-aligned canonical points per view
    poses: list[CameraPose]  # canonical(view-1)-to-camera-v
    local_depth: torch.Tensor  # (V, H, W)
    canonical_raw: torch.Tensor  # (V, H, W, 3) directly regressed canonical points
    degenerate: list[bool]

    @property
    def points(self) -> torch.Tensor:
        return torch.stack([p.points for p in self.pointmaps])


class PointHead(nn.Module):
    def __init__(self, dim: int, patch: int, seed: int = 0):
        super().__init__()
        self.patch = patch
        gen = torch.Generator().manual_seed(seed)
        self.proj = nn.Linear(dim, patch * patch * POINT_CHANNELS)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=gen) * 0.02)
            self.proj.bias.zero_()

    def forward(self, decoded: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return tokens_to_pixels(self.proj(decoded), h, w, self.patch)

    def geometry(self, decoded: torch.Tensor, h: int, w: int, intr: Intrinsics) -> Geometry:
        raw = self(decoded, h, w)
        views, H, W, _ = raw.shape
        rays = torch.as_tensor(intr.pixel_rays(H, W), dtype=raw.dtype)
        depth = torch.exp(raw[..., 3])
        conf = F.softplus(raw[..., 4])
        canonical = raw[..., :3]
        local = depth[..., None] * rays
        pointmaps, poses, flags = [], [], []
        for v in range(views):
            if v == 0:
                R, t, bad = torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64), False
            else:
                with torch.no_grad():
                    R, t, bad = procrustes(local[v], canonical[v], conf[v])
            pts = local[v] @ R.to(raw.dtype).T + t.to(raw.dtype)
            pointmaps.append(Pointmap(0, pts, conf[v]))
            cam_to_canon = CameraPose.from_matrix(R.numpy(), t.numpy())
            poses.append(cam_to_canon.inverse())
            flags.append(bad)
        return Geometry(pointmaps, poses, depth, canonical, flags)


def point_head(head: PointHead, decoded: list[TokenGrid], intr: Intrinsics) -> tuple[list[Pointmap], list[CameraPose]]:
    if len(decoded) < 2:
        raise ValueError("point_head needs at least two views")
    x = torch.stack([g.tokens for g in decoded])
    geo = head.geometry(x, decoded[0].h, decoded[0].w, intr)
    return geo.pointmaps, geo.poses


class GaussianHead(nn.Module):
    """Per-token MLP -> per-pixel features -> per-pixel linear map (with an RGB input) -> Gaussian params."""

    def __init__(self, dim: int, patch: int, cfg: HeadConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or HeadConfig()
        self.cfg = cfg
        self.patch = patch
        hidden = cfg.hidden_dim or 2 * dim
        gen = torch.Generator().manual_seed(seed)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, patch * patch * cfg.pixel_features)
        self.out = nn.Linear(cfg.pixel_features + 3, cfg.raw_channels)
        with torch.no_grad():
            for layer in (self.fc1, self.fc2):
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) * 0.02)
                layer.bias.zero_()
            self.out.weight.zero_()
            self.out.bias.zero_()

    def raw(self, decoded: torch.Tensor, images: torch.Tensor, h: int, w: int) -> torch.Tensor:
        if images.shape[1] != h * self.patch or images.shape[2] != w * self.patch:
            raise ValueError(f"token grid {h}x{w} (patch {self.patch}) does not match images "
                             f"{tuple(images.shape[1:3])}")
        feats = tokens_to_pixels(self.fc2(F.gelu(self.fc1(decoded))), h, w, self.patch)
        return self.out(torch.cat([feats, images.to(feats.dtype)], dim=-1))

    def forward(self, decoded: torch.Tensor, images: torch.Tensor, h: int, w: int,
                base_means: torch.Tensor, footprint: torch.Tensor,
                valid: torch.Tensor | None = None) -> GaussianSet:
        """decoded (V, L, C); images, base_means (V, H, W, 3); footprint (V, H, W) in scene units.

        Returns V*H*W Gaussians (fewer when ``valid`` masks pixels out).
        """
        raw = self.raw(decoded, images, h, w)
        cfg = self.cfg
        k = cfg.sh_coeffs
        offset = cfg.offset_range * torch.tanh(raw[..., 0:3])
        opacity_logit = raw[..., 3]
        lo, hi = cfg.log_scale_range
        log_scale = torch.clamp(raw[..., 4:7], lo, hi) + torch.log(footprint)[..., None]
        identity = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=raw.dtype)
        rot = raw[..., 7:11] + identity
        rot = rot / rot.norm(dim=-1, keepdim=True)
        sh = raw[..., 11:].reshape(*raw.shape[:-1], 3, k)
        dc_shortcut = rgb_to_sh_dc(images.to(raw.dtype))
        sh = torch.cat([sh[..., :1] + dc_shortcut[..., None], sh[..., 1:]], dim=-1)
        means = base_means.to(raw.dtype) + offset
        flat = lambda t, *s: t.reshape(-1, *s)
        g = GaussianSet(flat(means, 3), flat(opacity_logit), flat(log_scale, 3), flat(rot, 4), flat(sh, 3, k))
        if valid is not None:
            g = g.index(valid.reshape(-1))
        return g


def gaussian_head(head: GaussianHead, decoded: list[TokenGrid], images: list[torch.Tensor],
                  pointmaps: list[Pointmap], intr: Intrinsics, local_depth: torch.Tensor) -> GaussianSet:
    if len(decoded) != len(images):
        raise ValueError(f"{len(decoded)} token grids for {len(images)} images")
    x = torch.stack([g.tokens for g in decoded])
    imgs = torch.stack(images)
    base = torch.stack([p.points for p in pointmaps])
    return head(x, imgs, decoded[0].h, decoded[0].w, base, pixel_footprint(local_depth, intr))


def pixel_footprint(depth: torch.Tensor, intr: Intrinsics) -> torch.Tensor:
    """Scene-space width of one pixel at the given camera depth."""
    return depth / (0.5 * (intr.fx + intr.fy))
