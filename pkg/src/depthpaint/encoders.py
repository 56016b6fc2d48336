"""Two-branch multimodal encoders.

Depth branch: partial convolutions that renormalize each window by its
valid-pixel count and propagate the validity mask layer by layer.
RGB branch: gated convolutions (feature path modulated by a learned
sigmoid gate), consuming the image concatenated with the known mask.

Both branches share one channel schedule so features pair up per scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import FeatureMap, MaskedRGB, SparseDepthMap, is_binary_mask

__all__ = [
    "DEFAULT_CHANNELS",
    "DEPTH_SCALE",
    "PartialConv2d",
    "GatedConv2d",
    "EncoderPyramid",
    "DepthEncoder",
    "RgbEncoder",
    "propagate_mask",
]

DEFAULT_CHANNELS = (32, 64, 128, 256, 256)  # stem + 4 stride-2 stages
DEPTH_SCALE = 1.0 / 80.0                    # meters -> unit-scale network input


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x.unsqueeze(0), True
    return x, False


def _mask_like(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Normalize a (H,W) / (1,H,W) / (B,1,H,W) mask to (B,1,H,W) for x."""
    if mask.ndim == 2:
        mask = mask.unsqueeze(0).unsqueeze(0)
    elif mask.ndim == 3:
        mask = mask.unsqueeze(0)
    if mask.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match input {tuple(x.shape)}")
    if mask.shape[0] == 1 and x.shape[0] > 1:
        mask = mask.expand(x.shape[0], -1, -1, -1)
    return mask.to(x.dtype)


def propagate_mask(mask: torch.Tensor, kernel_size: int, stride: int) -> torch.Tensor:
    """Mask update rule: an output pixel is valid iff its receptive window
    holds at least one valid input pixel."""
    ones = torch.ones(1, 1, kernel_size, kernel_size, dtype=mask.dtype, device=mask.device)
    count = F.conv2d(mask, ones, stride=stride, padding=kernel_size // 2)
    return (count > 0).to(mask.dtype)


class PartialConv2d(nn.Module):
    """Convolution over valid pixels only, renormalized per window.

    Each output pixel rescales conv(x * mask) by (in-window image area) /
    (in-window valid count), so a fully valid map reduces exactly to a
    dense convolution, border pixels included. Windows with no valid pixel
    emit exactly 0 and an invalid output-mask entry; the bias is applied
    only at valid outputs so it never leaks into invalid regions.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.in_channels = in_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size,
                              stride=stride, padding=kernel_size // 2, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x, squeeze = _as_batched(x)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        m = _mask_like(x, mask)
        if not is_binary_mask(m):
            raise ValueError("partial convolution requires a binary mask")

        raw = self.conv(x * m)
        with torch.no_grad():
            ones = torch.ones(1, 1, self.kernel_size, self.kernel_size,
                              dtype=m.dtype, device=m.device)
            pad = self.kernel_size // 2
            count = F.conv2d(m[:, :1], ones, stride=self.stride, padding=pad)
            area = F.conv2d(torch.ones_like(m[:, :1]), ones,
                            stride=self.stride, padding=pad)
            valid = count > 0
        scale = area / count.clamp(min=1.0)
        out = torch.where(valid, raw * scale + self.bias.view(1, -1, 1, 1),
                          torch.zeros((), dtype=raw.dtype, device=raw.device))
        new_mask = valid.to(m.dtype)
        if squeeze:
            return out.squeeze(0), new_mask.squeeze(0)
        return out, new_mask


class GatedConv2d(nn.Module):
    """Paired feature/gate convolutions: ELU(feature) * sigmoid(gate)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        pad = kernel_size // 2
        self.conv_feat = nn.Conv2d(in_channels, out_channels, kernel_size,
                                   stride=stride, padding=pad)
        self.conv_gate = nn.Conv2d(in_channels, out_channels, kernel_size,
                                   stride=stride, padding=pad)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, squeeze = _as_batched(x)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        out = F.elu(self.conv_feat(x)) * torch.sigmoid(self.conv_gate(x))
        return out.squeeze(0) if squeeze else out


@dataclass(frozen=True, eq=False)
class EncoderPyramid:
    """Per-scale features (index = scale level); the depth branch also
    carries its propagated validity masks, one per level."""

    features: tuple[FeatureMap, ...]
    masks: tuple[torch.Tensor, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for level, fm in enumerate(self.features):
            if fm.scale_level != level:
                raise ValueError(f"feature at index {level} has scale_level {fm.scale_level}")
        h0, w0 = self.features[0].spatial
        for level, fm in enumerate(self.features):
            if fm.spatial != (h0 >> level, w0 >> level):
                raise ValueError(f"level {level} has spatial size {fm.spatial}")

    @property
    def levels(self) -> int:
        return len(self.features) - 1

    def data(self, level: int) -> torch.Tensor:
        return self.features[level].data


def _check_divisible(h: int, w: int, levels: int) -> None:
    if h % (1 << levels) or w % (1 << levels):
        raise ValueError(f"input size {h}x{w} not divisible by 2^{levels}")


class DepthEncoder(nn.Module):
    """Partial-conv pyramid over sparse depth; set partial=False to ablate
    to plain dense convolutions (masks still propagated for consumers)."""

    def __init__(self, channels: tuple[int, ...] = DEFAULT_CHANNELS,
                 kernel_size: int = 3, partial: bool = True,
                 depth_scale: float = DEPTH_SCALE):
        super().__init__()
        self.channels = tuple(channels)
        self.kernel_size = kernel_size
        self.partial = partial
        self.depth_scale = depth_scale
        widths = (1,) + self.channels
        strides = (1,) + (2,) * (len(self.channels) - 1)
        if partial:
            self.layers = nn.ModuleList(
                PartialConv2d(widths[i], widths[i + 1], kernel_size, strides[i])
                for i in range(len(self.channels)))
        else:
            self.layers = nn.ModuleList(
                nn.Conv2d(widths[i], widths[i + 1], kernel_size, stride=strides[i],
                          padding=kernel_size // 2)
                for i in range(len(self.channels)))

    def forward(self, d: SparseDepthMap | torch.Tensor,
                mask: torch.Tensor | None = None) -> EncoderPyramid:
        if isinstance(d, SparseDepthMap):
            x, m = d.depth.unsqueeze(0), d.mask
        else:
            if mask is None:
                raise ValueError("a raw depth tensor needs an explicit mask")
            x, m = d, mask
        x, squeeze = _as_batched(x)
        m = _mask_like(x, mask if mask is not None else m)
        _check_divisible(x.shape[-2], x.shape[-1], self.levels)

        x = x * self.depth_scale
        features, masks = [], []
        for level, layer in enumerate(self.layers):
            if self.partial:
                x, m = layer(x, m)
            else:
                stride = 1 if level == 0 else 2
                x = layer(x)
                m = propagate_mask(m, self.kernel_size, stride)
            x = F.elu(x)
            features.append(FeatureMap(x.squeeze(0) if squeeze else x, level))
            masks.append(m.squeeze(0) if squeeze else m)
        return EncoderPyramid(features=tuple(features), masks=tuple(masks))

    @property
    def levels(self) -> int:
        return len(self.channels) - 1


class RgbEncoder(nn.Module):
    """Gated-conv pyramid over the masked RGB image; the known mask rides
    along as a fourth input channel."""

    def __init__(self, channels: tuple[int, ...] = DEFAULT_CHANNELS,
                 kernel_size: int = 3):
        super().__init__()
        self.channels = tuple(channels)
        widths = (4,) + self.channels
        strides = (1,) + (2,) * (len(self.channels) - 1)
        self.layers = nn.ModuleList(
            GatedConv2d(widths[i], widths[i + 1], kernel_size, strides[i])
            for i in range(len(self.channels)))

    def forward(self, r: MaskedRGB | torch.Tensor,
                mask: torch.Tensor | None = None) -> EncoderPyramid:
        if isinstance(r, MaskedRGB):
            x, m = r.rgb, r.mask
        else:
            if mask is None:
                raise ValueError("a raw rgb tensor needs an explicit mask")
            x, m = r, mask
        x, squeeze = _as_batched(x)
        m = _mask_like(x, m)
        _check_divisible(x.shape[-2], x.shape[-1], self.levels)

        x = torch.cat([x, m], dim=1)
        features = []
        for level, layer in enumerate(self.layers):
            x = layer(x)
            features.append(FeatureMap(x.squeeze(0) if squeeze else x, level))
        return EncoderPyramid(features=tuple(features))

    @property
    def levels(self) -> int:
        return len(self.channels) - 1
