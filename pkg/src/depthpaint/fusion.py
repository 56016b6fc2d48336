"""Depth-guided fusion and the decoder.

Depth features are turned into spatially-variant depthwise kernels that
filter the RGB-side features (guided dynamic filtering), factorized as a
per-pixel k x k depthwise pass followed by a learned 1x1 channel mixer,
with residual adds around both the interaction feature and the filtering.
The decoder upsamples progressively, fusing at every scale and adding the
RGB pyramid as skip connections, then composites the known region back
from the input.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import FeatureMap, MaskedRGB, SparseDepthMap, downsample_mask
from .encoders import (
    DEFAULT_CHANNELS,
    DEPTH_SCALE,
    DepthEncoder,
    EncoderPyramid,
    RgbEncoder,
    _as_batched,
    _mask_like,
)

__all__ = [
    "DynamicKernelField",
    "KernelGenerator",
    "FusionStage",
    "ConcatFusionStage",
    "GeneratorOutput",
    "OutpaintingGenerator",
    "make_interaction_feature",
    "apply_dynamic_kernels",
]


@dataclass(frozen=True, eq=False)
class DynamicKernelField:
    """Per-pixel depthwise filter weights: (..., C, k*k, H, W)."""

    kernels: torch.Tensor
    kernel_size: int = 3

    def __post_init__(self):
        if self.kernels.ndim not in (4, 5):
            raise ValueError(f"kernels must be (C,k2,H,W) or (B,C,k2,H,W), got {tuple(self.kernels.shape)}")
        if self.kernels.shape[-3] != self.kernel_size ** 2:
            raise ValueError(
                f"kernel axis {self.kernels.shape[-3]} != k^2 = {self.kernel_size ** 2}"
            )

    @property
    def spatial(self) -> tuple[int, int]:
        return self.kernels.shape[-2], self.kernels.shape[-1]


class KernelGenerator(nn.Module):
    """3x3 convolution mapping C depth channels to C*k*k dynamic-kernel
    channels, tanh-bounded to keep the generated filters stable."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.channels = channels
        self.kernel_size = kernel_size
        self.conv = nn.Conv2d(channels, channels * kernel_size ** 2, 3, padding=1)

    def forward(self, f_d: torch.Tensor | FeatureMap) -> DynamicKernelField:
        x = f_d.data if isinstance(f_d, FeatureMap) else f_d
        x, squeeze = _as_batched(x)
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        w = torch.tanh(self.conv(x))
        b, _, h, width = w.shape
        field = w.view(b, self.channels, self.kernel_size ** 2, h, width)
        return DynamicKernelField(field.squeeze(0) if squeeze else field,
                                  self.kernel_size)


def make_interaction_feature(reduce: nn.Module, f_r: torch.Tensor,
                             f_d: torch.Tensor, known_mask: torch.Tensor) -> torch.Tensor:
    """Residual channel reduction of the stacked (rgb, depth, mask) features:
    f_r + reduce(concat(f_r, f_d, mask))."""
    f_r, squeeze = _as_batched(f_r)
    f_d, _ = _as_batched(f_d)
    if f_r.shape != f_d.shape:
        raise ValueError(f"rgb {tuple(f_r.shape)} and depth {tuple(f_d.shape)} features must match")
    m = _mask_like(f_r, known_mask)
    out = f_r + reduce(torch.cat([f_r, f_d, m], dim=1))
    return out.squeeze(0) if squeeze else out


def apply_dynamic_kernels(field: DynamicKernelField, f: torch.Tensor,
                          mix: nn.Module) -> torch.Tensor:
    """Spatially-variant depthwise filtering (zero padding) followed by a
    1x1 channel mixer, with a residual add of the input."""
    x, squeeze = _as_batched(f)
    ker = field.kernels
    if ker.ndim == 4:
        ker = ker.unsqueeze(0)
    b, c, h, w = x.shape
    if ker.shape[1] != c or ker.shape[-2:] != (h, w):
        raise ValueError(f"kernel field {tuple(field.kernels.shape)} does not match features {tuple(f.shape)}")
    k = field.kernel_size
    patches = F.unfold(x, k, padding=k // 2).view(b, c, k * k, h, w)
    filtered = (patches * ker).sum(dim=2)
    out = mix(filtered) + x
    return out.squeeze(0) if squeeze else out


class FusionStage(nn.Module):
    """One depth-guidance fusion block at a single pyramid scale."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.reduce = nn.Conv2d(2 * channels + 1, channels, 1)
        self.generator = KernelGenerator(channels, kernel_size)
        self.mix = nn.Conv2d(channels, channels, 1)

    def forward(self, f_r: torch.Tensor, f_d: torch.Tensor,
                known_mask: torch.Tensor) -> torch.Tensor:
        inter = make_interaction_feature(self.reduce, f_r, f_d, known_mask)
        field = self.generator(f_d)
        return apply_dynamic_kernels(field, inter, self.mix)


class ConcatFusionStage(nn.Module):
    """Ablation fusion: plain channel concatenation + 1x1 reduction, no
    dynamic filtering."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.reduce = nn.Conv2d(2 * channels + 1, channels, 1)

    def forward(self, f_r: torch.Tensor, f_d: torch.Tensor,
                known_mask: torch.Tensor) -> torch.Tensor:
        return make_interaction_feature(self.reduce, f_r, f_d, known_mask)


@dataclass(eq=False)
class GeneratorOutput:
    """Forward-pass products: the composited output, the raw full-canvas
    prediction, and the bottleneck tensors the losses consume."""

    composited: torch.Tensor
    prediction: torch.Tensor
    depth_bottleneck: torch.Tensor
    rgb_bottleneck: torch.Tensor
    depth_mask_bottleneck: torch.Tensor
    known_mask_bottleneck: torch.Tensor


class OutpaintingGenerator(nn.Module):
    """Full generator: two encoder branches, per-scale depth-guided fusion,
    progressive decoding, sigmoid output, known-region compositing."""

    def __init__(self, channels: tuple[int, ...] = DEFAULT_CHANNELS,
                 kernel_size: int = 3, use_depth_guidance: bool = True,
                 use_partial_conv: bool = True, depth_scale: float = DEPTH_SCALE):
        super().__init__()
        self.channels = tuple(channels)
        self.use_depth_guidance = use_depth_guidance
        self.use_partial_conv = use_partial_conv
        self.depth_encoder = DepthEncoder(self.channels, kernel_size,
                                          partial=use_partial_conv,
                                          depth_scale=depth_scale)
        self.rgb_encoder = RgbEncoder(self.channels, kernel_size)
        stage = FusionStage if use_depth_guidance else ConcatFusionStage
        self.fusions = nn.ModuleList(stage(c, kernel_size) for c in self.channels)
        self.up_convs = nn.ModuleList(
            nn.Conv2d(self.channels[n + 1], self.channels[n], 3, padding=1)
            for n in range(self.levels))
        self.to_rgb = nn.Conv2d(self.channels[0], 3, 1)
        # zero-init output head: an untrained generator predicts exactly
        # sigmoid(0) = 0.5 in the unknown region
        nn.init.zeros_(self.to_rgb.weight)
        nn.init.zeros_(self.to_rgb.bias)

    @property
    def levels(self) -> int:
        return len(self.channels) - 1

    def fuse_and_decode(self, depth_pyr: EncoderPyramid, rgb_pyr: EncoderPyramid,
                        rgb: torch.Tensor, known_mask: torch.Tensor,
                        ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode paired pyramids into (composited, raw prediction)."""
        rgb, squeeze = _as_batched(rgb)
        mask = _mask_like(rgb, known_mask)
        levels = self.levels
        level_masks = [downsample_mask(mask, n) for n in range(levels + 1)]

        def feat(pyr, n):
            x, _ = _as_batched(pyr.data(n))
            return x

        state = self.fusions[levels](feat(rgb_pyr, levels), feat(depth_pyr, levels),
                                     level_masks[levels])
        for n in reversed(range(levels)):
            state = F.interpolate(state, scale_factor=2, mode="nearest")
            state = F.elu(self.up_convs[n](state))
            state = self.fusions[n](state, feat(depth_pyr, n), level_masks[n])
            state = state + feat(rgb_pyr, n)
        pred = torch.sigmoid(self.to_rgb(state))
        composited = mask * rgb + (1.0 - mask) * pred
        if squeeze:
            return composited.squeeze(0), pred.squeeze(0)
        return composited, pred

    def forward(self, depth: torch.Tensor, depth_mask: torch.Tensor,
                rgb: torch.Tensor, known_mask: torch.Tensor) -> GeneratorOutput:
        """Batched forward: depth/depth_mask/known_mask (B,1,H,W), rgb (B,3,H,W)."""
        depth_pyr = self.depth_encoder(depth, depth_mask)
        rgb_pyr = self.rgb_encoder(rgb, known_mask)
        composited, pred = self.fuse_and_decode(depth_pyr, rgb_pyr, rgb, known_mask)
        levels = self.levels
        rgb_b, _ = _as_batched(rgb)
        mask_b = _mask_like(rgb_b, known_mask)
        return GeneratorOutput(
            composited=composited,
            prediction=pred,
            depth_bottleneck=depth_pyr.data(levels),
            rgb_bottleneck=rgb_pyr.data(levels),
            depth_mask_bottleneck=depth_pyr.masks[levels],
            known_mask_bottleneck=downsample_mask(mask_b, levels),
        )

    def outpaint(self, sample_depth: SparseDepthMap, sample_rgb: MaskedRGB) -> GeneratorOutput:
        """Single-sample convenience wrapper around forward()."""
        depth = sample_depth.depth.unsqueeze(0).unsqueeze(0)
        dmask = sample_depth.mask.unsqueeze(0).unsqueeze(0)
        rgb = sample_rgb.rgb.unsqueeze(0)
        kmask = sample_rgb.mask.unsqueeze(0).unsqueeze(0)
        out = self(depth, dmask, rgb, kmask)
        return GeneratorOutput(
            composited=out.composited.squeeze(0),
            prediction=out.prediction.squeeze(0),
            depth_bottleneck=out.depth_bottleneck.squeeze(0),
            rgb_bottleneck=out.rgb_bottleneck.squeeze(0),
            depth_mask_bottleneck=out.depth_mask_bottleneck.squeeze(0),
            known_mask_bottleneck=out.known_mask_bottleneck.squeeze(0),
        )
