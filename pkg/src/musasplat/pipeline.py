"""Two-stage training and evaluation on a synthetic scene.

Stage 1 fits the point head on frozen backbone tokens against ground-truth
geometry. Its pointmaps and poses are then fixed (g_phi), optional synthetic
views are rasterized from them, and stage 2 trains adapters, aggregator and
Gaussian head on the rendering loss.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import diffcore as dc
from .augment import SyntheticView, interpolate_poses, make_synthetic_views, mean_abs_loss
from .config import RunConfig
from .core import CameraPose, GaussianSet, save_png
from .heads import Geometry
from .model import MuSASplat
from .scene import Scene, write_ply
from .splat import RenderSettings, render_many
from .train import (NonFiniteLoss, make_optimizer, parameter_report, psnr, rgb_loss, ssim, step, tensor_hash,
                    total_loss, trainable_parameters)

STAGE2_GROUPS = ("adapters", "aggregator", "gaussian_head")


@dataclass
class Inputs:
    """Everything the Gaussian path consumes, with g_phi's outputs already fixed."""

    images: torch.Tensor  # (V + K, H, W, 3); the first V are the real views
    base_means: torch.Tensor  # (V + K, H, W, 3)
    depth: torch.Tensor  # (V + K, H, W)
    valid: torch.Tensor | None  # (V + K, H, W) or None when every pixel is kept
    poses: list[CameraPose]  # predicted poses of the real views
    synthetic: list[SyntheticView]

    @property
    def num_real(self) -> int:
        return len(self.poses)


class Pipeline:
    def __init__(self, cfg: RunConfig, scene: Scene, dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.scene = scene
        self.dtype = dtype
        H, W = scene.images.shape[1:3]
        self.settings = replace(cfg.render, height=H, width=W)
        self.model = MuSASplat(cfg.model).to(dtype)
        self.images = scene.images.to(dtype)
        self.geometry: Geometry | None = None
        self.inputs: Inputs | None = None

    # -- stage 1 -----------------------------------------------------------

    def stage1(self) -> list[dict]:
        cfg = self.cfg.stage1
        model = self.model
        groups = ("encoder", "decoder", "point_head") if cfg.train_backbone else ("point_head",)
        model.set_trainable(groups)
        with torch.no_grad():
            tokens = model.backbone_tokens(self.images)
        gt_points = self.scene.gt_points().to(self.dtype)
        gt_logdepth = self.scene.depths.log().to(self.dtype)
        h, w = model.cfg.vit.grid
        opt = torch.optim.Adam(trainable_parameters(model), lr=cfg.lr)
        history = []
        for it in range(cfg.iterations):
            opt.zero_grad(set_to_none=True)
            if cfg.train_backbone:
                tokens = model.backbone_tokens(self.images)
            raw = model.point_head(tokens, h, w)
            l_xyz = F.l1_loss(raw[..., :3], gt_points)
            l_depth = F.l1_loss(raw[..., 3], gt_logdepth)
            loss = l_xyz + cfg.depth_weight * l_depth
            loss.backward()
            opt.step()
            history.append({"iteration": it, "xyz_l1": l_xyz.item(), "logdepth_l1": l_depth.item()})
        model.set_trainable(())
        with torch.no_grad():
            tokens = model.backbone_tokens(self.images)
            self.geometry = model.point_head.geometry(tokens, h, w, self.scene.intrinsics)
        return history

    def stage1_state(self) -> dict[str, torch.Tensor]:
        """Backbone and point-head weights: everything g_phi depends on."""
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()
                if k.startswith(("encoder.", "decoder.", "point_head.")) and ".adapter." not in k}

    def load_stage1(self, state: dict[str, torch.Tensor]) -> None:
        """Reuse a finished stage 1 (same seed and backbone config) instead of refitting."""
        missing = set(self.stage1_state()) - set(state)
        if missing:
            raise KeyError(f"stage-1 state lacks {sorted(missing)[:3]}")
        self.model.load_state_dict(state, strict=False)
        self.model.set_trainable(())
        with torch.no_grad():
            tokens = self.model.backbone_tokens(self.images)
            h, w = self.model.cfg.vit.grid
            self.geometry = self.model.point_head.geometry(tokens, h, w, self.scene.intrinsics)

    def pose_errors(self) -> list[dict]:
        """Predicted vs ground-truth relative poses (rotation degrees, translation units)."""
        gt = self.scene.relative_poses()
        out = []
        for p, g in zip(self.geometry.poses, gt):
            d = p.compose(g.inverse())
            angle = float(np.degrees(2 * np.arccos(np.clip(abs(d.rotation[0]), 0.0, 1.0))))
            out.append({"rotation_deg": angle, "translation": float(np.linalg.norm(p.translation - g.translation))})
        return out

    # -- inputs for stage 2 ------------------------------------------------

    def prepare(self) -> Inputs:
        if self.geometry is None:
            raise RuntimeError("run stage1() first")
        geo = self.geometry
        V = self.images.shape[0]
        points = geo.points.detach()
        depth = geo.local_depth.detach()
        synthetic: list[SyntheticView] = []
        if self.cfg.augment.active(self.scene.overlap):
            poses_k = interpolate_poses(geo.poses[0], geo.poses[1], self.cfg.augment.K)
            synthetic = make_synthetic_views(points, self.images, poses_k, self.scene.intrinsics, self.settings,
                                             dump_dir=self.cfg.augment.dump_dir)
        images, base, depths, valid = [self.images], [points], [depth], [torch.ones_like(depth, dtype=torch.bool)]
        flat = points.reshape(-1, 3)
        for sv in synthetic:
            idx = torch.from_numpy(np.clip(sv.index, 0, None))
            ok = torch.from_numpy(sv.valid)
            images.append(sv.image.to(self.dtype)[None])
            base.append(torch.where(ok[..., None], flat[idx], torch.zeros(3, dtype=self.dtype))[None])
            depths.append(torch.where(ok, torch.from_numpy(sv.depth).to(self.dtype), torch.ones((), dtype=self.dtype))[None])
            valid.append(ok[None])
        valid_all = torch.cat(valid)
        self.inputs = Inputs(torch.cat(images), torch.cat(base), torch.cat(depths),
                             None if bool(valid_all.all()) else valid_all, list(geo.poses), synthetic)
        return self.inputs

    # -- stage 2 -----------------------------------------------------------

    def gaussians(self) -> GaussianSet:
        inp = self.inputs
        return self.model.gaussians(inp.images, inp.base_means, inp.depth, self.scene.intrinsics, inp.valid)

    def training_loss(self, batch=None) -> dict:
        inp = self.inputs
        V = inp.num_real
        views = list(range(V))[: self.cfg.optim.batch_size] if batch is None else list(batch)
        g = self.gaussians()
        aug_poses = [sv.pose for sv in inp.synthetic]
        renders = render_many(g, [inp.poses[v] for v in views] + aug_poses, self.scene.intrinsics, self.settings)
        rgb = torch.stack([rgb_loss(renders[i].image, self.images[v], self.cfg.loss)
                           for i, v in enumerate(views)]).mean()
        if inp.synthetic:
            aug = mean_abs_loss([r.image for r in renders[len(views):]], [sv.image for sv in inp.synthetic])
        else:
            aug = torch.zeros((), dtype=rgb.dtype)
        eq12 = total_loss(rgb, aug, self.cfg.loss)
        aux = self.model.aux_loss().to(rgb.dtype)
        return {"total": eq12 + aux, "eq12": eq12, "rgb": rgb, "aug": aug, "aux": aux,
                "num_gaussians": torch.tensor(float(len(g)))}

    def stage2(self, iterations: int | None = None, log_path: Path | None = None,
               checkpoint_dir: Path | None = None, callback=None) -> list[dict]:
        if self.inputs is None:
            self.prepare()
        self.model.set_trainable(STAGE2_GROUPS)
        opt = make_optimizer(trainable_parameters(self.model), self.cfg.optim)
        n = self.cfg.optim.iterations if iterations is None else iterations
        history = []
        log = open(log_path, "a") if log_path is not None else None
        try:
            for it in range(n):
                try:
                    rec = step(self, None, opt, self.cfg.optim)
                except NonFiniteLoss as exc:
                    if checkpoint_dir is not None:
                        dump = {"iteration": it, "error": str(exc), "diagnostics": exc.diagnostics,
                                "last_record": history[-1] if history else None}
                        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                        (Path(checkpoint_dir) / "abort.json").write_text(json.dumps(dump, indent=2))
                    raise
                rec["iteration"] = it
                history.append(rec)
                if log is not None and it % self.cfg.log_every == 0:
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                if checkpoint_dir is not None and self.cfg.checkpoint_every and (it + 1) % self.cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"step_{it + 1:05d}")
                if callback is not None:
                    callback(rec)
        finally:
            if log is not None:
                log.close()
        return history

    # -- evaluation --------------------------------------------------------

    @torch.no_grad()
    def evaluate(self) -> dict:
        g = self.gaussians()
        V = self.inputs.num_real
        train = render_many(g, self.inputs.poses, self.scene.intrinsics, self.settings)
        train_imgs = [r.image for r in train]
        held_imgs = []
        if len(self.scene.held_out_poses):
            # held-out cameras come from the scene, re-expressed relative to view 1
            rel = self.scene.relative_poses(self.scene.held_out_poses)
            held_imgs = [r.image for r in render_many(g, rel, self.scene.intrinsics, self.settings)]
        metrics = {
            "train_psnr": [psnr(r, self.images[v]) for v, r in enumerate(train_imgs)],
            "train_ssim": [ssim(r, self.images[v]) for v, r in enumerate(train_imgs)],
            "held_out_psnr": [psnr(r, t.to(r.dtype)) for r, t in zip(held_imgs, self.scene.held_out_images)],
            "held_out_ssim": [ssim(r, t.to(r.dtype)) for r, t in zip(held_imgs, self.scene.held_out_images)],
            "num_gaussians": len(g),
            "num_real_views": V,
            "num_synthetic_views": len(self.inputs.synthetic),
            "aggregator": dict(self.model.aggregator.stats),
        }
        for k in ("train_psnr", "train_ssim", "held_out_psnr", "held_out_ssim"):
            metrics[k + "_mean"] = float(np.mean(metrics[k])) if metrics[k] else None
        self._last_renders = (train_imgs, held_imgs)
        return metrics

    def render_grid(self, path: str | Path) -> Path:
        """Top row: inputs then held-out targets. Bottom row: the matching renders."""
        train_imgs, held_imgs = self._last_renders
        targets = list(self.images) + [t.to(self.dtype) for t in self.scene.held_out_images]
        renders = list(train_imgs) + list(held_imgs)
        grid = torch.cat([torch.cat(targets, dim=1), torch.cat(renders, dim=1)], dim=0)
        save_png(path, grid)
        return Path(path)

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        extra = {"config": self.cfg.to_dict(), "scene": str(self.scene.root) if self.scene.root else None,
                 "geometry": {"poses": [p.to_dict() for p in self.geometry.poses],
                              "degenerate": list(self.geometry.degenerate)}}
        return dc.save_checkpoint(self.model, path, extra)

    @classmethod
    def load(cls, path: str | Path, scene: Scene, dtype: torch.dtype = torch.float32) -> "Pipeline":
        manifest = dc.read_manifest(path)
        cfg = RunConfig.from_dict(manifest["extra"]["config"])
        pipe = cls(cfg, scene, dtype)
        dc.load_checkpoint(pipe.model, path)
        with torch.no_grad():
            tokens = pipe.model.backbone_tokens(pipe.images)
            h, w = pipe.model.cfg.vit.grid
            pipe.geometry = pipe.model.point_head.geometry(tokens, h, w, scene.intrinsics)
        pipe.prepare()
        return pipe

    def export_pointcloud(self, path: str | Path) -> Path:
        pts = self.geometry.points.detach().reshape(-1, 3).numpy()
        return write_ply(path, pts, self.images.reshape(-1, 3).numpy())


def train_run(cfg: RunConfig, scene: Scene, out_dir: str | Path | None = None,
              iterations: int | None = None, stage1_state: dict | None = None) -> tuple[Pipeline, dict]:
    """Both stages plus a final evaluation. Writes logs, checkpoints and a report when out_dir is given.

    ``stage1_state`` (from ``Pipeline.stage1_state``) skips the stage-1 fit; ablation
    variants of one seed share it so that they differ only in stage 2.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    t0 = time.perf_counter()
    pipe = Pipeline(cfg, scene)
    if stage1_state is None:
        s1 = pipe.stage1()
    else:
        pipe.load_stage1(stage1_state)
        s1 = []
    frozen_before = _frozen_backbone_hash(pipe.model)
    pipe.prepare()
    t1 = time.perf_counter()
    history = pipe.stage2(iterations, log_path=(out / "metrics.jsonl") if out else None,
                          checkpoint_dir=(out / "checkpoints") if out else None)
    t2 = time.perf_counter()
    metrics = pipe.evaluate()
    pipe.model.apply_freeze("default")
    report = {
        "format_version": 1,
        "kind": "train_report",
        "name": cfg.name,
        "seed": cfg.seed,
        "switches": cfg.switches,
        "iterations": len(history),
        "stage1": {"final": s1[-1] if s1 else None, "shared": stage1_state is not None,
                   "pose_errors": pipe.pose_errors(),
                   "degenerate": list(pipe.geometry.degenerate)},
        "final_loss": history[-1] if history else None,
        "first_loss": history[0] if history else None,
        "metrics": metrics,
        "parameters": parameter_report(pipe.model),
        "frozen_backbone_unchanged": frozen_before == _frozen_backbone_hash(pipe.model),
        "timing_s": {"stage1": t1 - t0, "stage2": t2 - t1, "per_step": (t2 - t1) / max(1, len(history))},
    }
    if out is not None:
        pipe.save(out / "checkpoints" / "final")
        pipe.render_grid(out / "renders.png")
        pipe.export_pointcloud(out / "pointcloud.ply")
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return pipe, report


def _frozen_backbone_hash(model: MuSASplat) -> str:
    """Hash of g_phi: backbone (minus adapters) and point head, fixed once stage 1 ends."""
    return tensor_hash({name: p for name, p in model.named_parameters()
                        if name.startswith(("encoder.", "decoder.", "point_head.")) and ".adapter." not in name})
