import json

import pytest
import torch

from musasplat.config import preset
from musasplat.pipeline import Pipeline, train_run
from musasplat.train import NonFiniteLoss, rgb_loss


def small_cfg(name="full", **overrides):
    overrides.setdefault("stage1", {"iterations": 20})
    return preset(name, model={"vit": {"image_size": [32, 32]}}, **overrides)


@pytest.fixture(scope="module")
def stage1(small_scene):
    pipe = Pipeline(small_cfg(), small_scene)
    pipe.stage1()
    return pipe.stage1_state()


def _pipe(small_scene, stage1, name="full", **overrides):
    pipe = Pipeline(small_cfg(name, **overrides), small_scene)
    pipe.load_stage1(stage1)
    pipe.prepare()
    return pipe


def test_augmentation_off_reduces_to_rgb_term(small_scene, stage1):
    pipe = _pipe(small_scene, stage1, "no-augment")
    losses = pipe.training_loss()
    assert losses["aug"].item() == 0.0
    assert torch.equal(losses["total"], pipe.cfg.loss.lambda_rgb * losses["rgb"])
    assert pipe.inputs.synthetic == []


def test_augmentation_adds_synthetic_views(small_scene, stage1):
    pipe = _pipe(small_scene, stage1)
    assert len(pipe.inputs.synthetic) == 4
    assert pipe.inputs.images.shape[0] == 6
    losses = pipe.training_loss()
    assert torch.allclose(losses["eq12"], losses["rgb"] + 0.05 * losses["aug"])


def test_rgb_term_uses_predicted_poses(small_scene, stage1):
    pipe = _pipe(small_scene, stage1, "no-augment")
    from musasplat.splat import render_many
    g = pipe.gaussians()
    renders = render_many(g, pipe.inputs.poses, small_scene.intrinsics, pipe.settings)
    expected = torch.stack([rgb_loss(r.image, pipe.images[v], pipe.cfg.loss) for v, r in enumerate(renders)]).mean()
    assert torch.allclose(pipe.training_loss()["rgb"], expected)


def test_memory_bank_invocations(small_scene, stage1):
    pipe = _pipe(small_scene, stage1, "memory-bank")
    pipe.stage2(1)
    m = pipe.evaluate()
    views = m["num_real_views"] + m["num_synthetic_views"]
    assert m["aggregator"]["invocations"] == views - 1


def test_stage2_only_moves_trainable_groups(small_scene, stage1):
    pipe = _pipe(small_scene, stage1)
    before = {k: v.clone() for k, v in pipe.model.state_dict().items()}
    pipe.stage2(2)
    after = pipe.model.state_dict()
    for k, v in before.items():
        moved = not torch.equal(v, after[k])
        frozen = k.startswith(("encoder.", "decoder.", "point_head.")) and ".adapter." not in k
        if frozen:
            assert not moved, k
    assert not torch.equal(before["gaussian_head.out.weight"], after["gaussian_head.out.weight"])


def test_loss_decreases(small_scene, stage1):
    pipe = _pipe(small_scene, stage1, "no-augment")
    hist = pipe.stage2(15)
    assert hist[-1]["rgb"] < hist[0]["rgb"]


def test_non_finite_loss_dumps_diagnostics(small_scene, stage1, tmp_path, monkeypatch):
    pipe = _pipe(small_scene, stage1, "no-augment")
    real = pipe.training_loss

    def poisoned(batch=None):
        out = real(batch)
        out["total"] = out["total"] * float("nan")
        return out

    monkeypatch.setattr(pipe, "training_loss", poisoned)
    with pytest.raises(NonFiniteLoss):
        pipe.stage2(3, checkpoint_dir=tmp_path)
    dump = json.loads((tmp_path / "abort.json").read_text())
    assert dump["iteration"] == 0 and "rgb" in dump["diagnostics"]


def test_train_run_artifacts_and_reload(small_scene, tmp_path):
    cfg = small_cfg(checkpoint_every=2)
    pipe, report = train_run(cfg, small_scene, tmp_path, iterations=4)
    assert report["frozen_backbone_unchanged"]
    assert report["format_version"] == 1 and report["switches"]["aggregation"] == "ffa"
    for name in ("config.json", "metrics.jsonl", "renders.png", "pointcloud.ply", "report.json",
                 "checkpoints/step_00002.npz", "checkpoints/step_00004.json", "checkpoints/final.npz"):
        assert (tmp_path / name).exists(), name
    again = Pipeline.load(tmp_path / "checkpoints" / "final", small_scene)
    m = again.evaluate()
    assert abs(m["train_psnr_mean"] - report["metrics"]["train_psnr_mean"]) < 0.01
    # grid: V inputs + K held-out panels per row
    from musasplat.core import load_png
    grid = load_png(tmp_path / "renders.png")
    assert grid.shape == (64, 32 * 3, 3)


def test_overlap_gating(small_scene, stage1):
    pipe = _pipe(small_scene, stage1, augment={"gating": "overlap"})
    expected = 4 if small_scene.overlap < 0.3 else 0
    assert len(pipe.inputs.synthetic) == expected
