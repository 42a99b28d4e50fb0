"""Shared domain types: cameras, pointmaps, Gaussian primitives, token grids, images.

Conventions used everywhere in the package:

* Poses are world-to-camera, right-handed, OpenCV style: the camera looks down
  +z, x points right and y points down in the image.
* Quaternions are stored (w, x, y, z).
* Pixel (u, v) covers [u, u+1) x [v, v+1); its center is (u + 0.5, v + 0.5).
* Images are float tensors of shape (H, W, 3) holding linear RGB in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


# --------------------------------------------------------------------------
# quaternions
# --------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalize quaternion {q}")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion with w >= 0 (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return -q if q[0] < 0 else q


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_to_rotmat_torch(q: torch.Tensor) -> torch.Tensor:
    """Batched (..., 4) quaternions -> (..., 3, 3) rotations; normalizes first."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    R = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return R.reshape(*q.shape[:-1], 3, 3)


# --------------------------------------------------------------------------
# cameras
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def pixel_rays(self, height: int, width: int) -> np.ndarray:
        """(H, W, 3) camera-space directions with z = 1 through pixel centers."""
        u = (np.arange(width) + 0.5 - self.cx) / self.fx
        v = (np.arange(height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: x_cam = R(rotation) @ x_world + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError(f"bad pose shapes: rotation {q.shape}, translation {t.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError(f"pose quaternion must be unit norm, got |q|={np.linalg.norm(q)}")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "CameraPose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> "CameraPose":
        """Camera at `eye` looking at `target`; image y points away from `up`."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera axes in world coords
        return cls.from_matrix(R, -R @ eye)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def to_4x4(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.matrix()
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.matrix().T + self.translation

    def compose(self, other: "CameraPose") -> "CameraPose":
        """self ∘ other: apply `other` first, then `self`."""
        q = quat_normalize(quat_multiply(self.rotation, other.rotation))
        t = self.matrix() @ other.translation + self.translation
        return CameraPose(q, t)

    def inverse(self) -> "CameraPose":
        qi = quat_conjugate(self.rotation)
        return CameraPose(qi, -(quat_to_matrix(qi) @ self.translation))

    def camera_center(self) -> np.ndarray:
        return -self.matrix().T @ self.translation

    def to_dict(self) -> dict:
        return {"rotation_wxyz": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(quat_normalize(np.array(d["rotation_wxyz"])), np.array(d["translation"], dtype=np.float64))


def pose_compose(a: CameraPose, b: CameraPose) -> CameraPose:
    return a.compose(b)


def pose_inverse(a: CameraPose) -> CameraPose:
    return a.inverse()


# --------------------------------------------------------------------------
# geometry containers
# --------------------------------------------------------------------------

@dataclass
class Pointmap:
    reference_view: int
    points: torch.Tensor  # (H, W, 3)
    confidence: torch.Tensor  # (H, W)

    def __post_init__(self):
        if self.points.shape[:2] != self.confidence.shape or self.points.shape[-1] != 3:
            raise ValueError(f"pointmap shapes disagree: points {tuple(self.points.shape)}, "
                             f"confidence {tuple(self.confidence.shape)}")
        if (self.confidence < 0).any():
            raise ValueError("pointmap confidence must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.confidence.shape)


@dataclass
class TokenGrid:
    view_index: int
    tokens: torch.Tensor  # (L, C)
    h: int
    w: int

    def __post_init__(self):
        if self.tokens.dim() != 2:
            raise ValueError(f"tokens must be (L, C), got {tuple(self.tokens.shape)}")
        if self.h * self.w != self.tokens.shape[0]:
            raise ValueError(f"grid {self.h}x{self.w} does not match token count {self.tokens.shape[0]}")

    @property
    def channel_dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


def covariance_from_params(log_scale: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """Sigma = R diag(exp(2 log_scale)) R^T for (..., 3) log-scales and (..., 4) quaternions."""
    if not (torch.isfinite(log_scale).all() and torch.isfinite(rotation).all()):
        raise ValueError("covariance_from_params received non-finite input")
    R = quat_to_rotmat_torch(rotation)
    M = R * torch.exp(log_scale).unsqueeze(-2)  # R @ diag(s)
    return M @ M.transpose(-1, -2)


@dataclass
class GaussianPrimitive:
    mean: torch.Tensor  # (3,)
    opacity_logit: torch.Tensor  # ()
    log_scale: torch.Tensor  # (3,)
    rotation: torch.Tensor  # (4,)
    sh: torch.Tensor  # (3, K)

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    def covariance(self) -> torch.Tensor:
        return covariance_from_params(self.log_scale, self.rotation)


@dataclass
class GaussianSet:
    """Structure-of-arrays storage for N Gaussians; `primitive(i)` gives one record."""

    means: torch.Tensor  # (N, 3)
    opacity_logits: torch.Tensor  # (N,)
    log_scales: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 4)
    sh: torch.Tensor  # (N, 3, K), K = (degree + 1)^2

    def __post_init__(self):
        n = self.means.shape[0]
        shapes = {
            "means": (self.means.shape, (n, 3)),
            "opacity_logits": (self.opacity_logits.shape, (n,)),
            "log_scales": (self.log_scales.shape, (n, 3)),
            "rotations": (self.rotations.shape, (n, 4)),
        }
        for name, (got, want) in shapes.items():
            if tuple(got) != want:
                raise ValueError(f"GaussianSet.{name} has shape {tuple(got)}, expected {want}")
        if self.sh.dim() != 3 or self.sh.shape[0] != n or self.sh.shape[1] != 3 or self.sh.shape[2] not in (1, 4):
            raise ValueError(f"GaussianSet.sh must be (N, 3, 1|4), got {tuple(self.sh.shape)}")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return 0 if self.sh.shape[2] == 1 else 1

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def covariances(self) -> torch.Tensor:
        return covariance_from_params(self.log_scales, self.rotations)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[i], self.opacity_logits[i], self.log_scales[i],
                                 self.rotations[i], self.sh[i])

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive]) -> "GaussianSet":
        return cls(torch.stack([p.mean for p in prims]),
                   torch.stack([p.opacity_logit for p in prims]),
                   torch.stack([p.log_scale for p in prims]),
                   torch.stack([p.rotation for p in prims]),
                   torch.stack([p.sh for p in prims]))

    @classmethod
    def cat(cls, sets: list["GaussianSet"]) -> "GaussianSet":
        return cls(*(torch.cat([getattr(s, f) for s in sets]) for f in
                     ("means", "opacity_logits", "log_scales", "rotations", "sh")))

    def index(self, idx) -> "GaussianSet":
        return GaussianSet(self.means[idx], self.opacity_logits[idx], self.log_scales[idx],
                           self.rotations[idx], self.sh[idx])

    def detach(self) -> "GaussianSet":
        return GaussianSet(self.means.detach(), self.opacity_logits.detach(), self.log_scales.detach(),
                           self.rotations.detach(), self.sh.detach())

    def to(self, dtype: torch.dtype) -> "GaussianSet":
        return GaussianSet(self.means.to(dtype), self.opacity_logits.to(dtype), self.log_scales.to(dtype),
                           self.rotations.to(dtype), self.sh.to(dtype))


def rgb_to_sh_dc(rgb: torch.Tensor) -> torch.Tensor:
    return (rgb - 0.5) / SH_C0


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def check_image(img: torch.Tensor, patch_size: int | None = None) -> None:
    if img.dim() != 3 or img.shape[-1] != 3:
        raise ValueError(f"image must be (H, W, 3), got {tuple(img.shape)}")
    if patch_size is not None and (img.shape[0] % patch_size or img.shape[1] % patch_size):
        raise ValueError(f"image size {tuple(img.shape[:2])} not divisible by patch size {patch_size}")


def srgb_encode(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(path: str | Path, img) -> None:
    """Write a linear-RGB image as an 8-bit sRGB PNG."""
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    u8 = np.round(srgb_encode(arr.astype(np.float64)) * 255.0).astype(np.uint8)
    PILImage.fromarray(u8).save(path)


def load_png(path: str | Path, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Read an 8-bit sRGB PNG into a linear-RGB (H, W, 3) tensor."""
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(srgb_decode(arr)).to(dtype)
