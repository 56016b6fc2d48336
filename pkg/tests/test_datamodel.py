"""Value types, mask algebra, and pair validation."""
import pytest
import torch

from depthpaint.datamodel import (
    FeatureMap,
    LossWeights,
    MaskedRGB,
    SparseDepthMap,
    downsample_mask,
    is_solid_rectangle,
    validate_pair,
)
from depthpaint.ingestion import synth_scene


def test_sparse_depth_rejects_value_under_zero_mask():
    depth = torch.zeros(4, 4)
    depth[1, 2] = 5.0
    with pytest.raises(ValueError, match="invalid pixels"):
        SparseDepthMap(depth=depth, mask=torch.zeros(4, 4))


def test_sparse_depth_rejects_negative_and_nonfinite():
    mask = torch.ones(2, 2)
    with pytest.raises(ValueError, match="non-negative"):
        SparseDepthMap(depth=torch.full((2, 2), -1.0), mask=mask)
    with pytest.raises(ValueError, match="non-finite"):
        SparseDepthMap(depth=torch.full((2, 2), float("nan")), mask=mask)


def test_sparse_depth_rejects_nonbinary_mask():
    with pytest.raises(ValueError, match="0/1"):
        SparseDepthMap(depth=torch.zeros(2, 2), mask=torch.full((2, 2), 0.5))


def test_masked_rgb_invariants():
    rgb = torch.rand(3, 4, 4)
    mask = torch.zeros(4, 4)
    mask[:, :2] = 1.0
    ok = MaskedRGB(rgb=rgb * mask, mask=mask)
    assert ok.resolution == (4, 4)
    with pytest.raises(ValueError, match="outside the known mask"):
        MaskedRGB(rgb=rgb, mask=mask)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        MaskedRGB(rgb=(rgb + 2.0) * mask, mask=mask)


def test_downsample_constant_mask():
    m = torch.ones(4, 4)
    assert torch.equal(downsample_mask(m, 1), torch.ones(2, 2))


def test_downsample_level_zero_identity():
    m = (torch.rand(6, 8) > 0.5).float()
    assert downsample_mask(m, 0) is m


def test_downsample_half_mask():
    m = torch.zeros(4, 4)
    m[:, :2] = 1.0
    expected = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert torch.equal(downsample_mask(m, 1), expected)


def test_downsample_rejects_indivisible():
    with pytest.raises(ValueError, match="not divisible"):
        downsample_mask(torch.ones(6, 6), 2)


def test_downsample_composes():
    torch.manual_seed(0)
    for _ in range(10):
        m = (torch.rand(16, 32) > 0.7).float()
        twice = downsample_mask(downsample_mask(m, 1), 1)
        assert torch.equal(twice, downsample_mask(m, 2))


def test_mask_idempotence():
    torch.manual_seed(1)
    m = (torch.rand(8, 8) > 0.5).float()
    assert torch.equal(m * m, m)


def test_feature_map_contracts():
    fm = FeatureMap(torch.zeros(2, 4, 4), scale_level=1)
    assert fm.channels == 2 and fm.spatial == (4, 4)
    with pytest.raises(ValueError):
        FeatureMap(torch.zeros(4, 4))
    with pytest.raises(ValueError):
        FeatureMap(torch.zeros(2, 4, 4), scale_level=-1)


def test_loss_weights_validation():
    LossWeights(0.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        LossWeights(-0.1, 1.0, 0.5, 0.05)
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0, 0.0)


def test_solid_rectangle_detector():
    m = torch.zeros(6, 6)
    m[2:5, 1:4] = 1.0
    assert is_solid_rectangle(m)
    m[3, 2] = 0.0
    assert not is_solid_rectangle(m)
    assert not is_solid_rectangle(torch.zeros(6, 6))


def _pair(h=32, w=64):
    full = torch.rand(3, h, w)
    mask = torch.zeros(h, w)
    mask[:, w // 4: 3 * w // 4] = 1.0
    r = MaskedRGB(rgb=full * mask, mask=mask)
    keep = (torch.rand(h, w) > 0.9).float()
    d = SparseDepthMap(depth=torch.rand(h, w) * 10 * keep, mask=keep)
    return d, r


def test_validate_pair_accepts_matched():
    d, r = _pair()
    validate_pair(d, r)


def test_validate_pair_rejects_shape_mismatch():
    d, _ = _pair(32, 64)
    _, r = _pair(16, 32)
    with pytest.raises(ValueError, match="resolution mismatch"):
        validate_pair(d, r)


def test_validate_pair_rejects_inplace_corruption():
    d, r = _pair()
    d.depth[0, 0] = 5.0  # valid only if mask[0,0] == 1
    d.mask[0, 0] = 0.0
    with pytest.raises(ValueError, match="nonzero under zero mask"):
        validate_pair(d, r)


def test_validate_pair_accepts_generated_samples():
    for seed in range(5):
        s = synth_scene(seed, 0.07, (64, 128))
        validate_pair(s.depth, s.input_rgb)
