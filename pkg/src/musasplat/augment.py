"""Viewpoint augmentation: interpolated cameras, point-cloud renders, and the consistency loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .core import CameraPose, GaussianSet, Intrinsics, quat_normalize, save_png
from .splat import RenderSettings, render_many, render_pointcloud


@dataclass
class AugmentConfig:
    enabled: bool = True
    K: int = 4
    overlap_threshold: float = 0.30
    gating: str = "always"  # or "overlap": only when the scene's overlap is below the threshold
    dump_dir: str | None = None

    def __post_init__(self):
        if self.enabled and self.K < 1:
            raise ValueError("K must be >= 1 when augmentation is enabled")
        if self.gating not in ("always", "overlap"):
            raise ValueError(f"unknown gating mode {self.gating!r}")

    def active(self, overlap: float | None = None) -> bool:
        if not self.enabled:
            return False
        if self.gating == "overlap" and overlap is not None:
            return overlap < self.overlap_threshold
        return True

    def to_dict(self) -> dict:
        return asdict(self)


def slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Shortest-arc spherical interpolation of unit quaternions (wxyz)."""
    q0 = quat_normalize(np.asarray(q0, dtype=np.float64))
    q1 = quat_normalize(np.asarray(q1, dtype=np.float64))
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    # endpoints are returned as-is (q1 possibly sign-flipped onto the short arc)
    if t == 0.0:
        return q0
    if t == 1.0:
        return q1
    if d > 1.0 - 1e-12:
        return quat_normalize(q0 + t * (q1 - q0))
    theta = np.arccos(min(d, 1.0))
    s = np.sin(theta)
    return quat_normalize((np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / s)


def interpolate_pose(a: CameraPose, b: CameraPose, t: float) -> CameraPose:
    """Pose at parameter t in [0, 1]; t=0 gives ``a`` and t=1 gives ``b`` exactly."""
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    trans = (1.0 - t) * a.translation + t * b.translation
    return CameraPose(slerp(a.rotation, b.rotation, t), trans)


def interpolate_poses(a: CameraPose, b: CameraPose, K: int) -> list[CameraPose]:
    return [interpolate_pose(a, b, k / (K + 1)) for k in range(1, K + 1)]


@dataclass
class SyntheticView:
    image: torch.Tensor  # (H, W, 3)
    pose: CameraPose
    index: np.ndarray  # (H, W) source point per pixel, -1 for holes
    depth: np.ndarray  # (H, W)
    synthetic: bool = True

    @property
    def valid(self) -> np.ndarray:
        return self.index >= 0


def make_synthetic_views(points, colors, poses: list[CameraPose], intr: Intrinsics,
                         settings: RenderSettings | None = None, dump_dir: str | Path | None = None
                         ) -> list[SyntheticView]:
    """Rasterize the colored point cloud once per pose."""
    pts = torch.as_tensor(points).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("make_synthetic_views needs a nonempty point cloud")
    views = []
    for k, pose in enumerate(poses):
        r = render_pointcloud(pts, colors, pose, intr, settings)
        views.append(SyntheticView(r.image, pose, r.index, r.depth))
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            save_png(Path(dump_dir) / f"synthetic_{k:02d}.png", r.image)
    return views


def aug_loss(gaussians: GaussianSet, poses: list[CameraPose], targets: list[torch.Tensor], intr: Intrinsics,
             settings: RenderSettings | None = None) -> torch.Tensor:
    """Mean over views of the per-image mean absolute error between render and target."""
    if len(poses) != len(targets):
        raise ValueError(f"{len(poses)} poses but {len(targets)} targets")
    if not poses:
        raise ValueError("aug_loss needs at least one pose")
    settings = settings or RenderSettings()
    renders = render_many(gaussians, poses, intr, settings)
    losses = [(r.image - t.to(r.image.dtype)).abs().mean() for r, t in zip(renders, targets)]
    return torch.stack(losses).mean()


def mean_abs_loss(renders: list[torch.Tensor], targets: list[torch.Tensor]) -> torch.Tensor:
    """The same reduction on images that are already rendered."""
    if len(renders) != len(targets):
        raise ValueError(f"{len(renders)} renders but {len(targets)} targets")
    return torch.stack([(r - t.to(r.dtype)).abs().mean() for r, t in zip(renders, targets)]).mean()
