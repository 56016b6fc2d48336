"""Projection, layout, synthetic scenes, and sample IO."""
import math

import numpy as np
import pytest
import torch
from PIL import Image

from depthpaint.datamodel import validate_pair
from depthpaint.ingestion import (
    CameraIntrinsics,
    PointCloud,
    Sample,
    load_sample,
    make_layout,
    project_points,
    render_scene,
    save_sample,
    synth_scene,
)

CAM = CameraIntrinsics(fx=256.0, fy=256.0, cx=128.0, cy=128.0, width=256, height=256)


def test_project_principal_ray_point():
    cloud = PointCloud(torch.tensor([[0.0, 0.0, 10.0]]))
    depth, dropped = project_points(cloud, CAM)
    assert dropped == 0
    assert depth.depth[128, 128] == pytest.approx(10.0)
    assert float(depth.mask.sum()) == 1.0


def test_project_empty_cloud():
    depth, dropped = project_points(PointCloud(torch.zeros(0, 3)), CAM)
    assert dropped == 0
    assert float(depth.depth.abs().sum()) == 0.0
    assert float(depth.mask.sum()) == 0.0


def test_project_collision_takes_minimum():
    # both points land on the principal pixel; brute-force projection of
    # each confirms the collision, the z-buffer keeps the nearer one
    pts = torch.tensor([[0.0, 0.0, 9.0], [0.0, 0.0, 5.0]])
    for u_check, v_check, z in [(128, 128, 9.0), (128, 128, 5.0)]:
        assert math.floor(CAM.fx * 0.0 / z + CAM.cx) == u_check
        assert math.floor(CAM.fy * 0.0 / z + CAM.cy) == v_check
    depth, _ = project_points(PointCloud(pts), CAM)
    assert depth.depth[128, 128] == pytest.approx(5.0)


def test_project_drops_near_and_outside():
    pts = torch.tensor([
        [0.0, 0.0, 0.05],     # behind near plane
        [1000.0, 0.0, 1.0],   # projects far outside
        [0.0, 0.0, 10.0],     # lands
    ])
    depth, dropped = project_points(PointCloud(pts), CAM)
    assert dropped == 2
    assert float(depth.mask.sum()) == 1.0


def test_project_permutation_invariant():
    rng = np.random.default_rng(3)
    pts = np.stack([
        rng.uniform(-20, 20, 200),
        rng.uniform(-20, 20, 200),
        rng.uniform(0.5, 50, 200),
    ], axis=1)
    a, _ = project_points(PointCloud(torch.tensor(pts, dtype=torch.float64)), CAM)
    perm = rng.permutation(200)
    b, _ = project_points(PointCloud(torch.tensor(pts[perm], dtype=torch.float64)), CAM)
    assert torch.equal(a.depth, b.depth)
    assert torch.equal(a.mask, b.mask)


def test_project_depth_scaling_keeps_pixel_set():
    # fixed x/z, y/z rays: scaling z leaves (u, v) unchanged and scales
    # every valid pixel's value exactly
    rng = np.random.default_rng(4)
    dirs = rng.uniform(-0.4, 0.4, size=(100, 2))
    z = rng.uniform(1.0, 30.0, size=100)
    pts = np.stack([dirs[:, 0] * z, dirs[:, 1] * z, z], axis=1)
    alpha = 2.5
    scaled = pts * alpha
    a, _ = project_points(PointCloud(torch.tensor(pts)), CAM)
    b, _ = project_points(PointCloud(torch.tensor(scaled)), CAM)
    assert torch.equal(a.mask, b.mask)
    sel = a.mask > 0
    assert torch.allclose(b.depth[sel], a.depth[sel] * alpha, rtol=1e-6)


def test_layout_mask_sum():
    full = torch.rand(3, 256, 512)
    out = make_layout(full)
    assert float(out.mask.sum()) == 256 * 256


def test_layout_zero_image():
    out = make_layout(torch.zeros(3, 256, 512))
    assert float(out.rgb.abs().sum()) == 0.0
    assert float(out.mask.sum()) == 256 * 256


def test_layout_column_sums_on_ones():
    out = make_layout(torch.ones(3, 256, 512))
    col_sums = out.rgb.sum(dim=(0, 1))
    assert float(col_sums[0]) == 0.0
    assert float(col_sums[200]) == 768.0  # 3 * 256


def test_layout_rejects_bad_shape():
    with pytest.raises(ValueError):
        make_layout(torch.zeros(3, 256, 256))
    with pytest.raises(ValueError):
        make_layout(torch.zeros(1, 256, 512))


def test_layout_masking_idempotent():
    full = torch.rand(3, 64, 128)
    once = make_layout(full)
    twice = make_layout(once.rgb)
    assert torch.equal(once.rgb, twice.rgb)


def test_synth_deterministic():
    a = synth_scene(0, 0.07, (64, 128))
    b = synth_scene(0, 0.07, (64, 128))
    assert torch.equal(a.full_rgb, b.full_rgb)
    assert torch.equal(a.depth.depth, b.depth.depth)
    assert torch.equal(a.depth.mask, b.depth.mask)
    assert a.meta == b.meta
    c = synth_scene(1, 0.07, (64, 128))
    assert not torch.equal(a.full_rgb, c.full_rgb)


def test_synth_full_sparsity():
    s = synth_scene(2, 1.0, (64, 128))
    assert float(s.depth.mask.mean()) == 1.0


def test_synth_sparsity_binomial_bound():
    s = synth_scene(0, 0.07, (256, 512))
    n = 256 * 512
    expected = 0.07 * n
    sigma = math.sqrt(n * 0.07 * 0.93)
    assert abs(float(s.depth.mask.sum()) - expected) < 3 * sigma


def test_synth_rejects_bad_sparsity():
    with pytest.raises(ValueError):
        synth_scene(0, 0.0)
    with pytest.raises(ValueError):
        synth_scene(0, 1.5)


def test_box_silhouettes_jump_in_depth_and_color():
    # cuboid silhouette edges appear in both modalities at the same pixels:
    # sides and top are depth discontinuities with color contrast, the
    # ground-contact row is depth-continuous but still color-contrasted
    for seed in range(3):
        rgb, dense, geo = render_scene(seed, (128, 256))
        lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
        for b in geo.boxes:
            cols = np.arange(b.col0, b.col1)
            if not b.open_top:
                assert (np.abs(dense[b.row0 - 1, cols] - dense[b.row0, cols]) > 1.0).all()
                assert (np.abs(lum[b.row0 - 1, cols] - lum[b.row0, cols]) > 0.05).all()
            # side edges, excluding the depth-continuous contact row
            rows = np.arange(b.row0, b.row1 - 1)
            for inner, outer in [(b.col0, b.col0 - 1), (b.col1 - 1, b.col1)]:
                assert (np.abs(dense[rows, inner] - dense[rows, outer]) > 0.1).all()
                assert (np.abs(lum[rows, inner] - lum[rows, outer]) > 0.05).all()
            # bottom edge: color-only boundary
            assert (np.abs(lum[b.row1 - 1, cols] - lum[b.row1, cols]) > 0.05).all()


def test_scene_boxes_render_at_their_depth():
    rgb, dense, geo = render_scene(1, (128, 256))
    for b in geo.boxes:
        # interior of each box face sits at its constant depth (another box
        # cannot overwrite it: column slots are disjoint)
        inner = dense[b.row0 + 1:b.row1 - 1, b.col0 + 1:b.col1 - 1]
        assert np.allclose(inner, b.depth_m)


def test_save_load_round_trip(tmp_path):
    s = synth_scene(0, 0.07, (64, 128))
    save_sample(s, tmp_path / "s0")
    loaded = load_sample(tmp_path / "s0")
    validate_pair(loaded.depth, loaded.input_rgb)
    assert torch.equal(loaded.depth.mask, s.depth.mask)
    assert float((loaded.depth.depth - s.depth.depth).abs().max()) <= 1.0 / 256.0
    assert float((loaded.full_rgb - s.full_rgb).abs().max()) <= 1.0 / 255.0
    assert loaded.meta["seed"] == 0


def test_depth_png_encoding(tmp_path):
    s = synth_scene(0, 0.07, (64, 128))
    # overwrite one valid pixel with a known value and check the raw png
    depth = s.depth.depth.clone()
    mask = s.depth.mask.clone()
    vi, vj = [int(t[0]) for t in torch.nonzero(mask, as_tuple=True)]
    depth[vi, vj] = 10.0
    patched = Sample(full_rgb=s.full_rgb, input_rgb=s.input_rgb,
                     depth=type(s.depth)(depth=depth, mask=mask), meta=s.meta)
    save_sample(patched, tmp_path / "enc")
    raw = np.asarray(Image.open(tmp_path / "enc" / "depth.png"))
    assert raw[vi, vj] == 2560  # 10.0 m * 256
    again = load_sample(tmp_path / "enc")
    assert float(again.depth.depth[vi, vj]) == pytest.approx(10.0)


def test_load_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_sample(tmp_path / "nothing_here")


def test_load_corrupt_rgb(tmp_path):
    s = synth_scene(0, 0.07, (64, 128))
    save_sample(s, tmp_path / "c")
    Image.fromarray(np.zeros((64, 128), dtype=np.uint8), mode="L").save(
        tmp_path / "c" / "rgb.png")
    with pytest.raises(ValueError, match="mode"):
        load_sample(tmp_path / "c")


def test_save_rejects_out_of_range_depth(tmp_path):
    s = synth_scene(0, 0.07, (64, 128))
    depth = s.depth.depth.clone()
    mask = s.depth.mask.clone()
    vi, vj = [int(t[0]) for t in torch.nonzero(mask, as_tuple=True)]
    depth[vi, vj] = 300.0  # beyond the 16-bit range at 1/256 m resolution
    bad = Sample(full_rgb=s.full_rgb, input_rgb=s.input_rgb,
                 depth=type(s.depth)(depth=depth, mask=mask), meta=s.meta)
    with pytest.raises(ValueError, match="16-bit"):
        save_sample(bad, tmp_path / "bad")
