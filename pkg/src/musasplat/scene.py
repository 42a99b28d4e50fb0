"""Analytic toy scenes: a colored room with a cube and a sphere, seen from a camera ring."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import CameraPose, Intrinsics, save_png

FORMAT_VERSION = 1
LIGHT_DIR = np.array([0.4, -0.8, -0.45]) / np.linalg.norm([0.4, -0.8, -0.45])  # points toward the light
ROOM_COLORS = [(0.80, 0.35, 0.30), (0.30, 0.65, 0.40), (0.85, 0.80, 0.55),
               (0.35, 0.40, 0.75), (0.70, 0.55, 0.80), (0.45, 0.75, 0.80)]


@dataclass
class ObjectSpec:
    kind: str  # "cube" | "sphere"
    center: tuple[float, float, float]
    size: float  # half-extent for cubes, radius for spheres
    colors: list[tuple[float, float, float]]  # 6 face colors (cube) or 2 band colors (sphere)
    yaw_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cube", "sphere"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if self.size <= 0:
            raise ValueError("object size must be positive")


def default_objects() -> list[ObjectSpec]:
    return [
        ObjectSpec("cube", (-0.35, 0.15, 0.1), 0.35,
                   [(0.9, 0.2, 0.2), (0.2, 0.8, 0.3), (0.2, 0.3, 0.9),
                    (0.9, 0.8, 0.2), (0.8, 0.3, 0.8), (0.2, 0.8, 0.8)], yaw_deg=25.0),
        ObjectSpec("sphere", (0.45, 0.05, -0.25), 0.4, [(0.95, 0.6, 0.2), (0.25, 0.25, 0.3)]),
    ]


@dataclass
class SceneSpec:
    seed: int = 0
    objects: list[ObjectSpec] = field(default_factory=default_objects)
    ring_radius: float = 2.6
    elevation_deg: float = 12.0
    azimuths_deg: list[float] = field(default_factory=lambda: [0.0, 30.0])
    held_out_azimuths_deg: list[float] = field(default_factory=lambda: [15.0])
    target_overlap: float | None = None
    image_size: tuple[int, int] = (64, 64)
    focal: float = 58.0
    room_half_size: float = 4.0
    supersample: int = 3
    color_jitter: float = 0.08
    output_dir: str | None = None

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if len(self.azimuths_deg) < 2:
            raise ValueError("a scene needs at least two cameras")
        if self.ring_radius >= self.room_half_size:
            raise ValueError("camera ring must lie inside the room")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def intrinsics(self) -> Intrinsics:
        h, w = self.image_size
        return Intrinsics(self.focal, self.focal, w / 2.0, h / 2.0)

    def pose(self, azimuth_deg: float) -> CameraPose:
        az, el = math.radians(azimuth_deg), math.radians(self.elevation_deg)
        r = self.ring_radius
        eye = (r * math.cos(el) * math.sin(az), -r * math.sin(el), r * math.cos(el) * math.cos(az))
        # y points down in camera space, so world "up" is -y
        return CameraPose.look_at(eye, (0.0, 0.0, 0.0), up=(0.0, -1.0, 0.0))


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------

def _yaw(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _hit_room(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        t_axes = np.where(d > 0, (half - o) / d, np.where(d < 0, (-half - o) / d, np.inf))
    axis = np.argmin(t_axes, axis=-1)
    t = np.take_along_axis(t_axes, axis[..., None], -1)[..., 0]
    sign = np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
    face = 2 * axis + (sign > 0)
    normal = np.zeros_like(d)
    np.put_along_axis(normal, axis[..., None], -sign[..., None], -1)
    return t, normal, face


def _hit_cube(o, d, obj: ObjectSpec):
    R = _yaw(obj.yaw_deg)
    c = np.asarray(obj.center)
    lo_ = (o - c) @ R  # into the cube's frame
    ld = d @ R
    s = obj.size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-s - lo_) / ld
        t2 = (s - lo_) / ld
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    t = np.where(hit, tmin, np.inf)
    p = lo_ + np.where(hit, tmin, 0.0)[..., None] * ld
    axis = np.argmax(np.abs(p) / s, axis=-1)
    sign = np.sign(np.take_along_axis(p, axis[..., None], -1)[..., 0])
    normal_local = np.zeros_like(p)
    np.put_along_axis(normal_local, axis[..., None], sign[..., None], -1)
    face = 2 * axis + (sign > 0)
    return t, normal_local @ R.T, face


def _hit_sphere(o, d, obj: ObjectSpec):
    c = np.asarray(obj.center)
    oc = o - c
    b = np.sum(oc * d, -1)
    cc = np.sum(oc * oc, -1) - obj.size ** 2
    disc = b * b - cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    hit = (disc >= 0) & (t > 1e-6)
    t = np.where(hit, t, np.inf)
    p = o + np.where(hit, t, 0.0)[..., None] * d
    normal = (p - c) / obj.size
    band = (np.floor((np.arcsin(np.clip(normal[..., 1], -1, 1)) + math.pi / 2) / (math.pi / 6)) % 2).astype(int)
    return t, normal, band


def cast_rays(origin: np.ndarray, dirs: np.ndarray, spec: SceneSpec, colors: dict) -> tuple[np.ndarray, np.ndarray]:
    """Shade unit-direction rays from one origin. Returns (rgb (..., 3), distance along ray (...))."""
    o = np.broadcast_to(origin, dirs.shape)
    t, normal, face = _hit_room(o, dirs, spec.room_half_size)
    p = o + t[..., None] * dirs
    # checker modulation on the walls gives the backbone some texture to look at
    checker = (np.floor(p * 1.5).astype(int).sum(-1) % 2) * 0.18 + 0.82
    albedo = colors["room"][face] * checker[..., None]
    for i, obj in enumerate(spec.objects):
        fn = _hit_cube if obj.kind == "cube" else _hit_sphere
        t_o, n_o, idx = fn(o, dirs, obj)
        closer = t_o < t
        t = np.where(closer, t_o, t)
        normal = np.where(closer[..., None], n_o, normal)
        albedo = np.where(closer[..., None], colors["objects"][i][idx], albedo)
    shade = 0.45 + 0.55 * np.clip(normal @ LIGHT_DIR, 0.0, 1.0)
    return np.clip(albedo * shade[..., None], 0.0, 1.0), t


def _scene_colors(spec: SceneSpec) -> dict:
    rng = np.random.default_rng(spec.seed)
    jitter = lambda c: np.clip(np.asarray(c, float) + rng.uniform(-spec.color_jitter, spec.color_jitter, np.shape(c)),
                               0.05, 0.95)
    return {"room": jitter(ROOM_COLORS), "objects": [jitter(o.colors) for o in spec.objects]}


def render_view(spec: SceneSpec, pose: CameraPose, colors: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Supersampled linear RGB image (H, W, 3) and pixel-center camera depth (H, W)."""
    colors = colors or _scene_colors(spec)
    H, W = spec.image_size
    intr = spec.intrinsics()
    R = pose.matrix()  # rows are camera axes, so d_world = d_cam @ R
    origin = pose.camera_center()
    s = spec.supersample
    offs = (np.arange(s) + 0.5) / s
    acc = np.zeros((H, W, 3))
    for oy in offs:
        for ox in offs:
            u, v = np.meshgrid(np.arange(W) + ox, np.arange(H) + oy)
            rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1)
            dirs = rays @ R
            dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
            rgb, _ = cast_rays(origin, dirs, spec, colors)
            acc += rgb
    img = acc / (s * s)
    rays = intr.pixel_rays(H, W)
    dirs = rays @ R
    norm = np.linalg.norm(dirs, axis=-1)
    _, dist = cast_rays(origin, dirs / norm[..., None], spec, colors)
    depth = dist / norm  # ray distance -> camera z, since the ray has unit z in camera space
    return img, depth


# --------------------------------------------------------------------------
# overlap
# --------------------------------------------------------------------------

def backproject(depth: np.ndarray, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Camera depth map -> world points (H, W, 3)."""
    cam = depth[..., None] * intr.pixel_rays(*depth.shape)
    return pose.inverse().apply(cam.reshape(-1, 3)).reshape(cam.shape)


def view_overlap(depth_a: np.ndarray, pose_a: CameraPose, depth_b: np.ndarray, pose_b: CameraPose,
                 intr: Intrinsics, rel_tol: float = 0.02) -> float:
    """Fraction of view a's visible surface that is also visible (in frame, unoccluded) in view b."""
    pts = backproject(depth_a, pose_a, intr).reshape(-1, 3)
    cam = pose_b.apply(pts)
    z = cam[:, 2]
    H, W = depth_b.shape
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = np.floor(intr.fx * cam[:, 0] / zs + intr.cx).astype(int)
    v = np.floor(intr.fy * cam[:, 1] / zs + intr.cy).astype(int)
    inside = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    # compare against the farthest depth in a 3x3 neighborhood so grazing surfaces are not
    # mistaken for occluded ones; a genuinely hidden point is behind all of its neighbors
    padded = np.pad(depth_b, 1, mode="edge")
    far = np.max([padded[dy:dy + H, dx:dx + W] for dy in range(3) for dx in range(3)], axis=0)
    seen = np.zeros_like(inside)
    ui, vi = u[inside], v[inside]
    seen[inside] = z[inside] <= far[vi, ui] * (1.0 + rel_tol)
    return float(seen.mean())


def overlap_matrix(depths: list[np.ndarray], poses: list[CameraPose], intr: Intrinsics) -> np.ndarray:
    n = len(depths)
    m = np.eye(n)
    for a in range(n):
        for b in range(n):
            if a != b:
                m[a, b] = view_overlap(depths[a], poses[a], depths[b], poses[b], intr)
    return m


def scene_overlap(m: np.ndarray) -> float:
    """Mean symmetric overlap over all camera pairs."""
    n = m.shape[0]
    pairs = [(m[a, b] + m[b, a]) / 2 for a in range(n) for b in range(a + 1, n)]
    return float(np.mean(pairs))


# --------------------------------------------------------------------------
# generation and I/O
# --------------------------------------------------------------------------

@dataclass
class Scene:
    spec: SceneSpec
    intrinsics: Intrinsics
    images: torch.Tensor  # (V, H, W, 3) context views, linear RGB
    poses: list[CameraPose]
    depths: torch.Tensor  # (V, H, W)
    held_out_images: torch.Tensor  # (K, H, W, 3)
    held_out_poses: list[CameraPose]
    held_out_depths: torch.Tensor
    overlap: float
    overlap_pairs: np.ndarray
    root: Path | None = None

    @property
    def num_views(self) -> int:
        return self.images.shape[0]

    @property
    def low_overlap(self) -> bool:
        return self.overlap < 0.30

    def relative_poses(self, poses: list[CameraPose] | None = None) -> list[CameraPose]:
        """Poses re-expressed in the first context camera's frame."""
        inv0 = self.poses[0].inverse()
        return [p.compose(inv0) for p in (self.poses if poses is None else poses)]

    def gt_points(self) -> torch.Tensor:
        """Per-pixel ground-truth points of every context view in view 1's camera frame."""
        rel = self.relative_poses()
        pts = []
        for v in range(self.num_views):
            world = backproject(self.depths[v].numpy(), rel[v], self.intrinsics)
            pts.append(torch.from_numpy(world))
        return torch.stack(pts)


def _search_separation(spec: SceneSpec) -> list[float]:
    """Choose the second azimuth so the pair overlap lands near the target."""
    scale = 32 / max(spec.image_size)
    size = tuple(max(1, round(s * scale)) for s in spec.image_size)
    coarse = SceneSpec(**{**spec.to_dict(), "image_size": size, "focal": spec.focal * scale,
                          "supersample": 1, "target_overlap": None})
    intr = coarse.intrinsics()
    a0 = spec.azimuths_deg[0]
    p0 = coarse.pose(a0)
    _, d0 = render_view(coarse, p0)
    best, best_err = None, math.inf
    for sep in np.arange(2.0, 180.5, 2.0):
        p1 = coarse.pose(a0 + sep)
        _, d1 = render_view(coarse, p1)
        ov = scene_overlap(overlap_matrix([d0, d1], [p0, p1], intr))
        if abs(ov - spec.target_overlap) < best_err:
            best, best_err = float(sep), abs(ov - spec.target_overlap)
    if best_err > 0.05:
        warnings.warn(f"overlap target {spec.target_overlap} unreachable; closest is off by {best_err:.3f}",
                      RuntimeWarning, stacklevel=3)
    return [a0, a0 + best]


def generate_scene(spec: SceneSpec) -> Scene:
    if spec.target_overlap is not None:
        spec = SceneSpec(**{**spec.to_dict(), "azimuths_deg": _search_separation(spec)})
    colors = _scene_colors(spec)
    intr = spec.intrinsics()

    def views(azimuths):
        poses = [spec.pose(a) for a in azimuths]
        out = [render_view(spec, p, colors) for p in poses]
        imgs = torch.from_numpy(np.stack([o[0] for o in out])) if out else torch.zeros(0, *spec.image_size, 3,
                                                                                       dtype=torch.float64)
        deps = torch.from_numpy(np.stack([o[1] for o in out])) if out else torch.zeros(0, *spec.image_size,
                                                                                       dtype=torch.float64)
        return imgs, poses, deps

    images, poses, depths = views(spec.azimuths_deg)
    h_images, h_poses, h_depths = views(spec.held_out_azimuths_deg)
    m = overlap_matrix([d.numpy() for d in depths], poses, intr)
    return Scene(spec, intr, images, poses, depths, h_images, h_poses, h_depths, scene_overlap(m), m)


def write_ply(path: str | Path, points: np.ndarray, colors: np.ndarray | None = None) -> Path:
    """ASCII PLY point cloud; colors in [0, 1] are written as 8-bit."""
    path = Path(path)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        cols = np.clip(np.round(np.asarray(colors).reshape(-1, 3) * 255), 0, 255).astype(int)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    lines = header + ["end_header"]
    for i, p in enumerate(pts):
        row = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
        if colors is not None:
            row += f" {cols[i, 0]} {cols[i, 1]} {cols[i, 2]}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")
    return path


def save_scene(scene: Scene, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for role, imgs, poses in (("context", scene.images, scene.poses),
                              ("held_out", scene.held_out_images, scene.held_out_poses)):
        for i, (img, pose) in enumerate(zip(imgs, poses)):
            name = f"{role}_{i:02d}"
            save_png(root / "images" / f"{name}.png", img)
            entries.append({"name": name, "role": role, "image": f"images/{name}.png", "pose": pose.to_dict()})
    np.savez(root / "arrays.npz", images=scene.images.numpy(), depths=scene.depths.numpy(),
             held_out_images=scene.held_out_images.numpy(), held_out_depths=scene.held_out_depths.numpy())
    pts = scene.gt_points().numpy().reshape(-1, 3)
    write_ply(root / "points.ply", pts, scene.images.numpy().reshape(-1, 3))
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "scene",
        "spec": scene.spec.to_dict(),
        "intrinsics": scene.intrinsics.to_dict(),
        "views": entries,
        "overlap": {"scene": round(scene.overlap, 6), "pairs": np.round(scene.overlap_pairs, 6).tolist(),
                    "low_overlap_regime": scene.low_overlap},
        "arrays": "arrays.npz",
        "points": "points.ply",
    }
    (root / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    scene.root = root
    return root


def load_scene(root: str | Path) -> Scene:
    root = Path(root)
    path = root / "scene.json"
    if not path.exists():
        raise FileNotFoundError(f"no scene manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported scene format {manifest.get('format_version')}")
    arrays = np.load(root / manifest["arrays"])
    views = manifest["views"]
    poses = [CameraPose.from_dict(v["pose"]) for v in views if v["role"] == "context"]
    held = [CameraPose.from_dict(v["pose"]) for v in views if v["role"] == "held_out"]
    return Scene(SceneSpec.from_dict(manifest["spec"]), Intrinsics.from_dict(manifest["intrinsics"]),
                 torch.from_numpy(arrays["images"]), poses, torch.from_numpy(arrays["depths"]),
                 torch.from_numpy(arrays["held_out_images"]), held, torch.from_numpy(arrays["held_out_depths"]),
                 manifest["overlap"]["scene"], np.asarray(manifest["overlap"]["pairs"]), root)
