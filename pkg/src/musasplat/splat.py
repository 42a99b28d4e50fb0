"""CPU reference Gaussian splatting renderer and point-cloud rasterizer.

``render`` projects every Gaussian with the EWA approximation (camera-space
covariance pushed through the perspective Jacobian, plus a 0.3 px^2 low-pass),
sorts by camera-space mean depth and composites front to back per pixel. The
projection runs in torch so autograd covers means, scales, rotations, SH and
opacity; compositing runs in numba with a hand-written backward.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from . import _raster
from . import diffcore as dc
from .core import SH_C0, SH_C1, CameraPose, GaussianSet, Intrinsics, Pointmap


@dataclass
class RenderSettings:
    height: int = 64
    width: int = 64
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = 0.01
    far: float = 100.0
    transmittance_cutoff: float = 1e-4
    support_sigma: float = 3.0
    lowpass: float = 0.3
    tile: int = 8

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        if not 0.0 < self.transmittance_cutoff < 1.0:
            raise ValueError("transmittance_cutoff must lie in (0, 1)")


@dataclass
class Projected:
    """Screen-space quantities for C cameras x N Gaussians."""

    mean2d: torch.Tensor  # (C, N, 2)
    conic: torch.Tensor  # (C, N, 3) inverse 2D covariance (a, b, c)
    cov2d: torch.Tensor  # (C, N, 2, 2)
    color: torch.Tensor  # (C, N, 3)
    opacity: torch.Tensor  # (N,)
    depth: torch.Tensor  # (C, N)
    valid: torch.Tensor  # (C, N) bool
    radius: torch.Tensor  # (C, N) bounding half-width in px, no grad


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3), clamped to [0, 1] with straight-through gradient
    raw: torch.Tensor  # (H, W, 3), unclamped composite
    transmittance: torch.Tensor  # (H, W)
    weight_sum: torch.Tensor  # (H, W)
    order: np.ndarray = field(repr=False)


def _pose_tensors(poses: list[CameraPose], dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    R = torch.tensor(np.stack([p.matrix() for p in poses]), dtype=dtype)
    t = torch.tensor(np.stack([p.translation for p in poses]), dtype=dtype)
    centers = torch.tensor(np.stack([p.camera_center() for p in poses]), dtype=dtype)
    return R, t, centers


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Degree 0/1 real SH color with the usual +0.5 offset. sh (N,3,K), dirs (..., N, 3)."""
    color = (SH_C0 * sh[..., 0] + 0.5).expand(dirs.shape)
    if sh.shape[-1] > 1:
        x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
        color = color - SH_C1 * y * sh[..., 1] + SH_C1 * z * sh[..., 2] - SH_C1 * x * sh[..., 3]
    return color


def project(gaussians: GaussianSet, poses: list[CameraPose], intr: Intrinsics,
            settings: RenderSettings) -> Projected:
    dtype = gaussians.means.dtype
    R, t, centers = _pose_tensors(poses, dtype)
    means = gaussians.means
    p_cam = torch.einsum("cij,nj->cni", R, means) + t[:, None, :]
    z = p_cam[..., 2]
    valid = (z > settings.near) & (z < settings.far)
    z_safe = torch.where(valid, z, torch.ones_like(z))
    x, y = p_cam[..., 0], p_cam[..., 1]
    fx, fy = intr.fx, intr.fy
    mean2d = torch.stack([fx * x / z_safe + intr.cx, fy * y / z_safe + intr.cy], dim=-1)

    zeros = torch.zeros_like(z_safe)
    J = torch.stack([
        torch.stack([fx / z_safe, zeros, -fx * x / z_safe ** 2], dim=-1),
        torch.stack([zeros, fy / z_safe, -fy * y / z_safe ** 2], dim=-1),
    ], dim=-2)  # (C, N, 2, 3)
    sigma = gaussians.covariances()  # (N, 3, 3)
    M = J @ R[:, None]  # (C, N, 2, 3)
    cov2d = M @ sigma[None] @ M.transpose(-1, -2)
    cov2d = cov2d + settings.lowpass * torch.eye(2, dtype=dtype)
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)

    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
        radius = settings.support_sigma * torch.sqrt(lam)

    dirs = means[None] - centers[:, None, :]
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    color = eval_sh(gaussians.sh, dirs)
    return Projected(mean2d, conic, cov2d, color, gaussians.opacities, z, valid, radius)


def depth_order(depth: torch.Tensor, valid: torch.Tensor) -> np.ndarray:
    """Indices of valid Gaussians sorted front to back; ties broken by index."""
    d = depth.detach().cpu().numpy().astype(np.float64)
    ok = valid.cpu().numpy()
    idx = np.nonzero(ok)[0]
    return idx[np.argsort(d[idx], kind="stable")].astype(np.int64)


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, color, opacity, radius, order, bg, settings):
        np_in = [t.detach().cpu().numpy().astype(np.float64) for t in (mean2d, conic, color, opacity, radius)]
        offsets, items = _raster.bin_tiles(np_in[0], np_in[4], order, settings.height, settings.width, settings.tile)
        image, trans, wsum, ncontrib = _raster.forward(offsets, items, *np_in, bg, settings.height,
                                                       settings.width, settings.tile,
                                                       settings.transmittance_cutoff)
        ctx.saved = (offsets, items, np_in, bg, settings, ncontrib)
        ctx.dtype = mean2d.dtype
        out_t = torch.from_numpy(trans).to(mean2d.dtype)
        out_w = torch.from_numpy(wsum).to(mean2d.dtype)
        ctx.mark_non_differentiable(out_t, out_w)
        return torch.from_numpy(image).to(mean2d.dtype), out_t, out_w

    @staticmethod
    def backward(ctx, grad_image, _grad_t, _grad_w):
        offsets, items, np_in, bg, settings, ncontrib = ctx.saved
        g = _raster.backward(offsets, items, *np_in, bg, settings.height, settings.width, settings.tile,
                             ncontrib, grad_image.detach().cpu().numpy().astype(np.float64))
        g = [torch.from_numpy(a).to(ctx.dtype) for a in g]
        return g[0], g[1], g[2], g[3], None, None, None, None


def composite(mean2d, conic, color, opacity, radius, order, settings: RenderSettings):
    bg = np.asarray(settings.background, dtype=np.float64)
    return _Composite.apply(mean2d, conic, color, opacity, radius, order, bg, settings)


def composite_reference(mean2d, conic, color, opacity, radius, order, settings: RenderSettings):
    """Dense pure-torch compositing over every (pixel, Gaussian) pair; a test oracle."""
    H, W = settings.height, settings.width
    dtype = mean2d.dtype
    idx = torch.from_numpy(order)
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dtype) + 0.5, torch.arange(W, dtype=dtype) + 0.5, indexing="ij")
    pix = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)  # (P, 2)
    m, cn, col, op, r = mean2d[idx], conic[idx], color[idx], opacity[idx], radius[idx]
    d = pix[:, None, :] - m[None]  # (P, N, 2)
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (cn[:, 0] * dx * dx + cn[:, 2] * dy * dy) - cn[:, 1] * dx * dy
    inside = (dx.abs() <= r) & (dy.abs() <= r)
    alpha = torch.where(inside, op * torch.exp(power), torch.zeros_like(power))
    one = torch.ones_like(alpha[:, :1])
    t_excl = torch.cumprod(torch.cat([one, 1 - alpha[:, :-1]], dim=1), dim=1)
    keep = (t_excl >= settings.transmittance_cutoff).to(dtype).detach()
    alpha = alpha * keep
    t_excl = torch.cumprod(torch.cat([one, 1 - alpha[:, :-1]], dim=1), dim=1)
    w = alpha * t_excl
    t_final = torch.prod(1 - alpha, dim=1)
    bg = torch.tensor(settings.background, dtype=dtype)
    img = w @ col + t_final[:, None] * bg
    return img.reshape(H, W, 3), t_final.reshape(H, W), w.sum(1).reshape(H, W)


def _clamp_st(x: torch.Tensor) -> torch.Tensor:
    return x + (x.clamp(0.0, 1.0) - x).detach()


def render_many(gaussians: GaussianSet, poses: list[CameraPose], intr: Intrinsics,
                settings: RenderSettings, reference: bool = False) -> list[RenderOutput]:
    if len(gaussians) == 0:
        raise ValueError("cannot render an empty GaussianSet")
    proj = project(gaussians, poses, intr, settings)
    fn = composite_reference if reference else composite
    outs = []
    for c in range(len(poses)):
        order = depth_order(proj.depth[c], proj.valid[c])
        if order.size == 0:
            bg = torch.tensor(settings.background, dtype=gaussians.means.dtype)
            img = bg.expand(settings.height, settings.width, 3).clone()
            ones = torch.ones(settings.height, settings.width, dtype=img.dtype)
            outs.append(RenderOutput(img, img, ones, torch.zeros_like(ones), order))
            continue
        raw, trans, wsum = fn(proj.mean2d[c], proj.conic[c], proj.color[c], proj.opacity,
                              proj.radius[c], order, settings)
        outs.append(RenderOutput(_clamp_st(raw), raw, trans, wsum, order))
    return outs


def render(gaussians: GaussianSet, pose: CameraPose, intr: Intrinsics,
           settings: RenderSettings | None = None, reference: bool = False) -> torch.Tensor:
    """Differentiable render of one view; returns an (H, W, 3) image in [0, 1]."""
    return render_many(gaussians, [pose], intr, settings or RenderSettings(), reference)[0].image


def render_full(gaussians: GaussianSet, pose: CameraPose, intr: Intrinsics,
                settings: RenderSettings | None = None, reference: bool = False) -> RenderOutput:
    return render_many(gaussians, [pose], intr, settings or RenderSettings(), reference)[0]


# --------------------------------------------------------------------------
# point clouds
# --------------------------------------------------------------------------

@dataclass
class PointRender:
    image: torch.Tensor  # (H, W, 3)
    index: np.ndarray  # (H, W) source point per pixel, -1 for background
    depth: np.ndarray  # (H, W), inf for background
    empty: bool  # no point landed in the frame


def render_pointcloud(points, colors, pose: CameraPose, intr: Intrinsics,
                      settings: RenderSettings | None = None) -> PointRender:
    """Nearest-point z-buffer with a one-pixel footprint. Not differentiable."""
    settings = settings or RenderSettings()
    if isinstance(points, Pointmap):
        pts = points.points.reshape(-1, 3)
        colors = colors.reshape(-1, 3)
    else:
        pts = points
    pts = torch.as_tensor(pts).detach().cpu().numpy().astype(np.float64).reshape(-1, 3)
    cols = torch.as_tensor(colors).detach().cpu().numpy().astype(np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("render_pointcloud needs at least one point")
    cam = pose.apply(pts)
    z = cam[:, 2]
    front = (z > settings.near) & (z < settings.far)
    zs = np.where(front, z, 1.0)
    u = np.floor(intr.fx * cam[:, 0] / zs + intr.cx)
    v = np.floor(intr.fy * cam[:, 1] / zs + intr.cy)
    H, W = settings.height, settings.width
    inside = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    sel = np.nonzero(inside)[0]
    index_sel = _raster.zbuffer(u[sel].astype(np.int64), v[sel].astype(np.int64), z[sel], H, W)
    index = np.where(index_sel >= 0, sel[np.clip(index_sel, 0, None)] if sel.size else -1, -1)
    img = np.broadcast_to(np.asarray(settings.background, dtype=np.float64), (H, W, 3)).copy()
    lit = index >= 0
    img[lit] = cols[index[lit]]
    depth = np.full((H, W), np.inf)
    depth[lit] = z[index[lit]]
    empty = not lit.any()
    if empty:
        warnings.warn("render_pointcloud: no point projects into the frame", RuntimeWarning, stacklevel=2)
    return PointRender(torch.from_numpy(img), index, depth, empty)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

GAUSSIAN_FIELDS = ("means", "opacity_logits", "log_scales", "rotations", "sh")


def render_gradient_check(gaussians: GaussianSet, pose: CameraPose, intr: Intrinsics,
                          settings: RenderSettings, target: torch.Tensor,
                          eps: float = 1e-6) -> dict[str, float]:
    """Central-difference check of mse(render, target) w.r.t. every Gaussian field (fp64).

    Perturbations that change the depth sort order are skipped; compositing is
    piecewise in the order, so no derivative exists across such a change.
    """
    base = gaussians.to(torch.float64).detach()
    target = target.to(torch.float64)
    base_order = depth_order(*_depths(base, pose, settings))
    results = {}
    for name in GAUSSIAN_FIELDS:
        def loss_of(x, name=name):
            g = GaussianSet(**{f: (x if f == name else getattr(base, f)) for f in GAUSSIAN_FIELDS})
            return dc.mse(render_full(g, pose, intr, settings).raw, target)

        def skip(i, name=name):
            if name != "means":
                return False
            for sgn in (1.0, -1.0):
                x = base.means.clone()
                x.view(-1)[i] += sgn * eps
                g = GaussianSet(x, base.opacity_logits, base.log_scales, base.rotations, base.sh)
                if not np.array_equal(depth_order(*_depths(g, pose, settings)), base_order):
                    return True
            return False

        results[name] = dc.finite_difference_check(loss_of, getattr(base, name), eps, skip=skip)
    return results


def _depths(g: GaussianSet, pose: CameraPose, settings: RenderSettings):
    R = torch.tensor(pose.matrix(), dtype=g.means.dtype)
    t = torch.tensor(pose.translation, dtype=g.means.dtype)
    z = (g.means @ R.T + t)[:, 2]
    return z, (z > settings.near) & (z < settings.far)
