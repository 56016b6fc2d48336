"""Depth-guidance fusion, dynamic filtering, and the decoder."""
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from depthpaint.fusion import (
    DynamicKernelField,
    FusionStage,
    KernelGenerator,
    OutpaintingGenerator,
    apply_dynamic_kernels,
    make_interaction_feature,
)
from depthpaint.ingestion import synth_scene
from oracles import dynamic_filter_reference, finite_diff_check


def _identity_mix(channels):
    mix = nn.Conv2d(channels, channels, 1)
    with torch.no_grad():
        mix.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
        mix.bias.zero_()
    return mix


def _zero_mix(channels):
    mix = nn.Conv2d(channels, channels, 1)
    with torch.no_grad():
        mix.weight.zero_()
        mix.bias.zero_()
    return mix


def test_interaction_zero_reduce_is_identity():
    stage = FusionStage(channels=2)
    with torch.no_grad():
        stage.reduce.weight.zero_()
        stage.reduce.bias.zero_()
    f_r = torch.randn(2, 4, 4)
    out = make_interaction_feature(stage.reduce, f_r, torch.randn(2, 4, 4),
                                   torch.ones(4, 4))
    assert torch.equal(out, f_r)


def test_interaction_zero_rgb_path_depends_on_depth_only():
    torch.manual_seed(0)
    stage = FusionStage(channels=2)
    f_d = torch.randn(2, 4, 4)
    zeros = torch.zeros(2, 4, 4)
    out = make_interaction_feature(stage.reduce, zeros, f_d, torch.zeros(4, 4))
    expected = stage.reduce(
        torch.cat([zeros, f_d, torch.zeros(1, 4, 4)]).unsqueeze(0)).squeeze(0)
    assert torch.allclose(out, expected)


def test_interaction_matches_per_pixel_matmul():
    torch.manual_seed(1)
    stage = FusionStage(channels=2)
    f_r = torch.randn(2, 4, 4, dtype=torch.float64)
    f_d = torch.randn(2, 4, 4, dtype=torch.float64)
    mask = (torch.rand(4, 4) > 0.5).double()
    stage = stage.double()
    out = make_interaction_feature(stage.reduce, f_r, f_d, mask)

    w = stage.reduce.weight.detach().numpy()[:, :, 0, 0]  # (2, 5)
    b = stage.reduce.bias.detach().numpy()
    stack = np.concatenate([f_r.numpy(), f_d.numpy(), mask.numpy()[None]], axis=0)
    expected = np.zeros((2, 4, 4))
    for i in range(4):
        for j in range(4):
            expected[:, i, j] = f_r.numpy()[:, i, j] + w @ stack[:, i, j] + b
    assert np.allclose(out.detach().numpy(), expected, rtol=1e-12, atol=1e-12)


def test_interaction_rejects_mismatched_features():
    stage = FusionStage(channels=2)
    with pytest.raises(ValueError, match="must match"):
        make_interaction_feature(stage.reduce, torch.randn(2, 4, 4),
                                 torch.randn(2, 8, 8), torch.ones(4, 4))


def test_kernel_generator_zero_params_zero_field():
    gen = KernelGenerator(2)
    with torch.no_grad():
        gen.conv.weight.zero_()
        gen.conv.bias.zero_()
    field = gen(torch.randn(2, 4, 4))
    assert torch.equal(field.kernels, torch.zeros_like(field.kernels))


def test_kernel_generator_bias_tap_constant_field():
    gen = KernelGenerator(2)
    with torch.no_grad():
        gen.conv.weight.zero_()
        gen.conv.bias.zero_()
        gen.conv.bias[3] = 1.0  # channel 0, tap index 3
    field = gen(torch.randn(2, 5, 5))
    expected = math.tanh(1.0)
    assert torch.allclose(field.kernels[0, 3], torch.full((5, 5), expected))
    others = field.kernels.clone()
    others[0, 3] = 0.0
    assert torch.equal(others, torch.zeros_like(others))


def test_kernel_generator_locality():
    torch.manual_seed(2)
    gen = KernelGenerator(2)
    f = torch.randn(2, 10, 10)
    g = f.clone()
    g[:, 4:6, 4:6] += torch.randn(2, 2, 2)
    fa = gen(f).kernels
    fb = gen(g).kernels
    diff = (fa - fb).abs().sum(dim=(0, 1))  # (H, W)
    # a 3x3 generator conv dilates the perturbed region by one pixel
    region = torch.zeros(10, 10, dtype=torch.bool)
    region[3:7, 3:7] = True
    assert bool((diff[~region] == 0).all())


def test_apply_zero_field_zero_mix_is_residual():
    f = torch.randn(2, 4, 4)
    field = DynamicKernelField(torch.zeros(2, 9, 4, 4))
    out = apply_dynamic_kernels(field, f, _zero_mix(2))
    assert torch.equal(out, f)


def test_apply_delta_kernel_identity_mix_doubles():
    f = torch.randn(3, 5, 5)
    kernels = torch.zeros(3, 9, 5, 5)
    kernels[:, 4] = 1.0  # center tap of a 3x3 kernel
    out = apply_dynamic_kernels(DynamicKernelField(kernels), f, _identity_mix(3))
    assert torch.equal(out, 2 * f)


def test_apply_matches_triple_loop_reference():
    torch.manual_seed(3)
    for _ in range(5):
        c = int(torch.randint(1, 4, ()))
        f = torch.randn(c, 4, 6, dtype=torch.float64)
        kernels = torch.randn(c, 9, 4, 6, dtype=torch.float64)
        mix = nn.Conv2d(c, c, 1).double()
        out = apply_dynamic_kernels(DynamicKernelField(kernels), f, mix)
        ref = dynamic_filter_reference(
            kernels.numpy(), f.numpy(),
            mix.weight.detach().numpy()[:, :, 0, 0],
            mix.bias.detach().numpy(), 3)
        assert np.allclose(out.detach().numpy(), ref, rtol=1e-10, atol=1e-12)


def test_apply_is_local():
    torch.manual_seed(4)
    c = 2
    f = torch.randn(c, 8, 8)
    kernels = torch.randn(c, 9, 8, 8)
    mix = _identity_mix(c)
    base = apply_dynamic_kernels(DynamicKernelField(kernels), f, mix)
    g = f.clone()
    g[:, 6:, 6:] += 5.0  # outside the 3x3 window around (2, 2)
    changed = apply_dynamic_kernels(DynamicKernelField(kernels), g, mix)
    assert torch.equal(base[:, :4, :4], changed[:, :4, :4])


def test_apply_rejects_mismatched_field():
    f = torch.randn(2, 4, 4)
    field = DynamicKernelField(torch.zeros(3, 9, 4, 4))
    with pytest.raises(ValueError, match="does not match"):
        apply_dynamic_kernels(field, f, _zero_mix(2))


def _tiny_sample(h=32):
    return synth_scene(0, 0.1, (h, 2 * h))


def test_decode_known_region_identity():
    torch.manual_seed(5)
    gen = OutpaintingGenerator(channels=(4, 8, 8))
    s = _tiny_sample()
    out = gen.outpaint(s.depth, s.input_rgb)
    m = s.input_rgb.mask
    assert torch.equal(out.composited * m, s.input_rgb.rgb * m)


def test_decode_output_range():
    torch.manual_seed(6)
    gen = OutpaintingGenerator(channels=(4, 8, 8))
    for p in gen.parameters():
        with torch.no_grad():
            p.add_(torch.randn_like(p) * 0.5)
    s = _tiny_sample()
    out = gen.outpaint(s.depth, s.input_rgb)
    assert float(out.composited.min()) >= 0.0
    assert float(out.composited.max()) <= 1.0


def test_decode_zeroed_parameters_emit_half():
    gen = OutpaintingGenerator(channels=(4, 8, 8))
    for name, p in gen.named_parameters():
        if "encoder" not in name:
            with torch.no_grad():
                p.zero_()
    s = _tiny_sample()
    out = gen.outpaint(s.depth, s.input_rgb)
    unknown = s.input_rgb.mask == 0
    assert torch.allclose(out.composited[:, unknown],
                          torch.full_like(out.composited[:, unknown], 0.5))


def test_compositor_idempotent_on_known_pixels():
    torch.manual_seed(7)
    gen = OutpaintingGenerator(channels=(4, 8, 8))
    s = _tiny_sample()
    out = gen.outpaint(s.depth, s.input_rgb)
    m = s.input_rgb.mask
    recomposited = m * s.input_rgb.rgb + (1 - m) * out.composited
    assert torch.equal(recomposited * m, out.composited * m)


def test_depth_guidance_is_live():
    # perturbing the depth input must move the unknown-region output
    torch.manual_seed(8)
    gen = OutpaintingGenerator(channels=(4, 8, 8))
    for p in gen.parameters():
        with torch.no_grad():
            p.add_(torch.randn_like(p) * 0.2)
    s = _tiny_sample()
    depth = s.depth.depth.unsqueeze(0).unsqueeze(0).clone().requires_grad_(True)
    dmask = s.depth.mask.unsqueeze(0).unsqueeze(0)
    rgb = s.input_rgb.rgb.unsqueeze(0)
    kmask = s.input_rgb.mask.unsqueeze(0).unsqueeze(0)
    out = gen(depth, dmask, rgb, kmask)
    unknown_sum = (out.composited * (1 - kmask)).sum()
    (grad,) = torch.autograd.grad(unknown_sum, depth)
    assert float(grad.abs().sum()) > 0


def test_fusion_stage_gradients_end_to_end_tiny():
    # 8x16 input, 2 stride-2 levels, all parameters vs central differences
    torch.manual_seed(9)
    gen = OutpaintingGenerator(channels=(2, 3, 3)).double()
    for p in gen.parameters():
        with torch.no_grad():
            p.add_(torch.randn_like(p) * 0.1)
    keep = (torch.rand(8, 16) > 0.5).double()
    depth = (torch.rand(8, 16, dtype=torch.float64) * 20 * keep).unsqueeze(0).unsqueeze(0)
    dmask = keep.unsqueeze(0).unsqueeze(0)
    kmask = torch.zeros(1, 1, 8, 16, dtype=torch.float64)
    kmask[..., 4:12] = 1.0
    rgb = torch.rand(1, 3, 8, 16, dtype=torch.float64) * kmask
    target = torch.rand(1, 3, 8, 16, dtype=torch.float64)

    def loss():
        out = gen(depth, dmask, rgb, kmask)
        return ((out.composited - target) ** 2).sum()

    err = finite_diff_check(loss, list(gen.parameters()))
    assert err < 1e-3, err
