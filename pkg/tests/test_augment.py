import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from musasplat.augment import (AugmentConfig, aug_loss, interpolate_pose, interpolate_poses, make_synthetic_views,
                               mean_abs_loss, slerp)
from musasplat.core import CameraPose, Intrinsics, axis_angle_quat, quat_to_matrix
from musasplat.splat import RenderSettings, render

from helpers import random_gaussians, small_camera


def _angle_between(q0, q1):
    return 2 * np.arccos(min(1.0, abs(float(np.dot(q0, q1)))))


def test_slerp_45_degree_oracle():
    q0 = np.array([1.0, 0, 0, 0])
    q1 = axis_angle_quat([0, 0, 1], np.pi / 4)
    for t in (0.25, 0.5, 0.75):
        expected = axis_angle_quat([0, 0, 1], t * np.pi / 4)
        assert np.abs(slerp(q0, q1, t) - expected).max() < 1e-12


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_slerp_constant_speed(seed, t):
    rng = np.random.default_rng(seed)
    q0, q1 = (v / np.linalg.norm(v) for v in rng.normal(size=(2, 4)))
    q = slerp(q0, q1, t)
    total = _angle_between(q0, q1)
    assert abs(np.linalg.norm(q) - 1) < 1e-12
    assert abs(_angle_between(q0, q) - t * total) < 1e-6


def test_slerp_takes_shortest_arc_and_handles_identical():
    q = axis_angle_quat([1, 0, 0], 0.3)
    mid = slerp(q, -q, 0.5)
    assert np.allclose(quat_to_matrix(mid), quat_to_matrix(q))
    assert np.allclose(slerp(q, q, 0.3), q)


def test_pose_endpoints_are_exact():
    a = CameraPose.identity()
    b = CameraPose(axis_angle_quat([0, 1, 0], 0.7), np.array([0.3, -0.2, 1.0]))
    assert interpolate_pose(a, b, 0.0) is a and interpolate_pose(a, b, 1.0) is b
    poses = interpolate_poses(a, b, 4)
    assert len(poses) == 4
    assert np.allclose(poses[1].translation, 0.4 * b.translation)


def test_aug_loss_zero_on_matching_targets():
    pose, intr, s = small_camera(12)
    g = random_gaussians(20, seed=1)
    poses = [pose, CameraPose(axis_angle_quat([0, 1, 0], 0.05), np.zeros(3))]
    targets = [render(g, p, intr, s).detach() for p in poses]
    assert aug_loss(g, poses, targets, intr, s).item() == 0.0


def test_aug_loss_is_mean_absolute_error():
    pose, intr, s = small_camera(8)
    g = random_gaussians(10, seed=2)
    img = render(g, pose, intr, s).detach()
    shifted = (img + 0.1).clamp(0, 1)
    expected = (img - shifted).abs().mean()
    assert torch.allclose(aug_loss(g, [pose], [shifted], intr, s), expected)
    assert torch.allclose(mean_abs_loss([img, img], [shifted, img]), expected / 2)


def test_aug_loss_errors():
    pose, intr, s = small_camera(8)
    g = random_gaussians(4)
    with pytest.raises(ValueError):
        aug_loss(g, [pose], [], intr, s)
    with pytest.raises(ValueError):
        aug_loss(g, [], [], intr, s)


def test_synthetic_views(tmp_path):
    intr = Intrinsics(10.0, 10.0, 4.0, 4.0)
    s = RenderSettings(height=8, width=8)
    pts = torch.tensor([[0.0, 0.0, 2.0], [0.4, 0.4, 2.0]], dtype=torch.float64)
    cols = torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=torch.float64)
    poses = interpolate_poses(CameraPose.identity(), CameraPose(np.array([1.0, 0, 0, 0]), np.array([0.1, 0, 0])), 2)
    views = make_synthetic_views(pts, cols, poses, intr, s, dump_dir=tmp_path)
    assert len(views) == 2 and all(v.synthetic for v in views)
    assert views[0].valid.sum() == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["synthetic_00.png", "synthetic_01.png"]
    with pytest.raises(ValueError):
        make_synthetic_views(pts[:0], cols[:0], poses, intr, s)


def test_config_gating():
    assert not AugmentConfig(enabled=False).active(0.1)
    cfg = AugmentConfig(gating="overlap")
    assert cfg.active(0.1) and not cfg.active(0.9)
    assert AugmentConfig().active(0.9)
    with pytest.raises(ValueError):
        AugmentConfig(K=0)
