import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from musasplat.core import CameraPose, Intrinsics, TokenGrid, axis_angle_quat, quat_to_matrix
from musasplat.heads import (GaussianHead, HeadConfig, PointHead, gaussian_head, pixel_footprint, point_head,
                             procrustes, tokens_to_pixels)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_procrustes_recovers_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    R = quat_to_matrix(axis_angle_quat(axis, rng.uniform(-np.pi, np.pi)))
    t = rng.normal(size=3)
    src = rng.normal(size=(50, 3))
    dst = src @ R.T + t
    R_hat, t_hat, bad = procrustes(torch.from_numpy(src), torch.from_numpy(dst),
                                   torch.from_numpy(rng.uniform(0.1, 2.0, 50)))
    assert not bad
    assert np.abs(R_hat.numpy() - R).max() < 1e-6 and np.abs(t_hat.numpy() - t).max() < 1e-6


def test_procrustes_never_returns_a_reflection():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(20, 3))
    dst = src * np.array([1.0, 1.0, -1.0])  # a mirror image
    R, _, _ = procrustes(torch.from_numpy(src), torch.from_numpy(dst))
    assert abs(torch.det(R).item() - 1.0) < 1e-9


def test_procrustes_weights_ignore_outliers():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(30, 3))
    dst = src + np.array([0.5, 0.0, 0.0])
    dst[0] += 100.0
    w = np.ones(30)
    w[0] = 0.0
    R, t, _ = procrustes(torch.from_numpy(src), torch.from_numpy(dst), torch.from_numpy(w))
    assert torch.allclose(R, torch.eye(3, dtype=torch.float64), atol=1e-9)
    assert torch.allclose(t, torch.tensor([0.5, 0, 0], dtype=torch.float64), atol=1e-9)


def test_procrustes_degenerate_input():
    line = torch.linspace(0, 1, 10, dtype=torch.float64)[:, None] * torch.tensor([[1.0, 2.0, 3.0]])
    R, t, bad = procrustes(line, line + 1.0)
    assert bad and torch.equal(R, torch.eye(3, dtype=torch.float64))
    assert torch.allclose(t, torch.ones(3, dtype=torch.float64))


def test_tokens_to_pixels_layout():
    h, w, p, c = 2, 3, 2, 1
    x = torch.arange(h * w, dtype=torch.float32)[None, :, None].repeat(1, 1, p * p * c)
    img = tokens_to_pixels(x, h, w, p)
    assert img.shape == (1, h * p, w * p, c)
    for ty in range(h):
        for tx in range(w):
            block = img[0, ty * p:(ty + 1) * p, tx * p:(tx + 1) * p, 0]
            assert (block == ty * w + tx).all()


def _decoded(v=2, n=16, c=32, seed=0):
    return torch.randn(v, n, c, generator=torch.Generator().manual_seed(seed))


def test_point_head_first_view_is_identity():
    head = PointHead(32, 4, seed=0)
    intr = Intrinsics(20.0, 20.0, 8.0, 8.0)
    geo = head.geometry(_decoded(), 4, 4, intr)
    assert np.allclose(geo.poses[0].to_4x4(), np.eye(4))
    assert geo.points.shape == (2, 16, 16, 3)
    assert (geo.pointmaps[0].confidence >= 0).all()


def test_point_head_pose_is_consistent_with_pointmap():
    """Transforming view v's canonical points by its pose gives depth * ray in camera v."""
    head = PointHead(32, 4, seed=1)
    intr = Intrinsics(20.0, 20.0, 8.0, 8.0)
    geo = head.geometry(_decoded(3, seed=2), 4, 4, intr)
    rays = intr.pixel_rays(16, 16)
    for v in range(3):
        cam = geo.poses[v].apply(geo.pointmaps[v].points.detach().double().numpy().reshape(-1, 3))
        expected = (geo.local_depth[v].detach().double().numpy()[..., None] * rays).reshape(-1, 3)
        assert np.abs(cam - expected).max() < 1e-5


def test_point_head_requires_two_views():
    head = PointHead(32, 4)
    with pytest.raises(ValueError):
        point_head(head, [TokenGrid(0, torch.zeros(16, 32), 4, 4)], Intrinsics(1.0, 1.0, 0, 0))


def _gaussian_inputs(v=2, H=16, W=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand(v, H, W, 3, generator=gen)
    base = torch.randn(v, H, W, 3, generator=gen)
    footprint = torch.full((v, H, W), 0.02)
    return images, base, footprint


def test_gaussian_head_zero_init_is_pixel_aligned():
    head = GaussianHead(32, 4, seed=0)
    images, base, footprint = _gaussian_inputs()
    g = head(_decoded(), images, 4, 4, base, footprint)
    assert len(g) == 2 * 16 * 16
    assert torch.equal(g.means, base.reshape(-1, 3))  # one Gaussian per pixel, on its point
    assert torch.allclose(g.log_scales, torch.log(footprint).reshape(-1, 1).expand(-1, 3))
    assert torch.equal(g.rotations, torch.tensor([1.0, 0, 0, 0]).expand(len(g), 4))
    assert torch.allclose(g.opacities, torch.full((len(g),), 0.5))
    # DC color reproduces the pixel, higher orders start at zero
    from musasplat.core import SH_C0
    assert torch.allclose(SH_C0 * g.sh[:, :, 0] + 0.5, images.reshape(-1, 3), atol=1e-6)
    assert torch.count_nonzero(g.sh[:, :, 1:]) == 0


def test_gaussian_head_ranges():
    head = GaussianHead(32, 4, seed=0)
    with torch.no_grad():
        head.out.bias.fill_(50.0)
    images, base, footprint = _gaussian_inputs()
    g = head(_decoded(), images, 4, 4, base, footprint)
    assert (g.means - base.reshape(-1, 3)).abs().max() <= head.cfg.offset_range + 1e-6
    hi = head.cfg.log_scale_range[1]
    assert (g.log_scales - torch.log(footprint).reshape(-1, 1)).max() <= hi + 1e-5
    assert torch.allclose(g.rotations.norm(dim=-1), torch.ones(len(g)))


def test_gaussian_head_valid_mask_and_errors():
    head = GaussianHead(32, 4)
    images, base, footprint = _gaussian_inputs()
    valid = torch.zeros(2, 16, 16, dtype=torch.bool)
    valid[0, :4] = True
    assert len(head(_decoded(), images, 4, 4, base, footprint, valid)) == 64
    with pytest.raises(ValueError):
        head(_decoded(), images[:, :12], 4, 4, base, footprint)
    with pytest.raises(ValueError):
        HeadConfig(log_scale_range=(1.0, -1.0))
    assert HeadConfig().raw_channels == 23 and HeadConfig(sh_degree=0).raw_channels == 14


def test_gaussian_head_wrapper_and_footprint():
    intr = Intrinsics(20.0, 20.0, 8.0, 8.0)
    depth = torch.full((2, 16, 16), 2.0)
    assert torch.allclose(pixel_footprint(depth, intr), torch.full_like(depth, 0.1))
    head = GaussianHead(32, 4)
    ph = PointHead(32, 4)
    x = _decoded()
    grids = [TokenGrid(i, x[i], 4, 4) for i in range(2)]
    geo = ph.geometry(x, 4, 4, intr)
    images = [torch.rand(16, 16, 3) for _ in range(2)]
    g = gaussian_head(head, grids, images, geo.pointmaps, intr, geo.local_depth)
    assert len(g) == 512
