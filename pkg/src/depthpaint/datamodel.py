"""Core value types and the mask algebra shared by the whole pipeline.

Conventions used everywhere:
  * masks are float tensors holding exact 0/1 values,
  * invalid pixels store exact zeros (never NaN), so masked arithmetic
    stays finite,
  * RGB lives in [0, 1].

All types are immutable after construction and safe to share across
workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

__all__ = [
    "SparseDepthMap",
    "MaskedRGB",
    "FeatureMap",
    "LossWeights",
    "downsample_mask",
    "validate_pair",
    "is_binary_mask",
    "is_solid_rectangle",
]


def is_binary_mask(mask: torch.Tensor) -> bool:
    return bool(torch.all((mask == 0) | (mask == 1)))


def _require_binary(mask: torch.Tensor, name: str) -> None:
    if not is_binary_mask(mask):
        raise ValueError(f"{name} must contain only exact 0/1 values")


def is_solid_rectangle(mask: torch.Tensor) -> bool:
    """True iff the 1-entries of a 2-D binary mask form one non-empty
    axis-aligned rectangle."""
    if mask.ndim != 2:
        raise ValueError(f"expected 2-D mask, got shape {tuple(mask.shape)}")
    rows = mask.any(dim=1)
    cols = mask.any(dim=0)
    if not bool(rows.any()):
        return False
    for run in (rows, cols):
        idx = torch.nonzero(run).flatten()
        if int(idx[-1]) - int(idx[0]) + 1 != idx.numel():
            return False
    rect = rows.unsqueeze(1) & cols.unsqueeze(0)
    return bool(torch.equal(mask != 0, rect))


@dataclass(frozen=True, eq=False)
class SparseDepthMap:
    """Metric depth grid (meters) plus the validity mask of LiDAR returns.

    depth is exactly 0 wherever mask is 0.
    """

    depth: torch.Tensor  # (H, W) float
    mask: torch.Tensor   # (H, W) float, values in {0, 1}

    def __post_init__(self):
        if self.depth.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {tuple(self.depth.shape)}")
        if self.mask.shape != self.depth.shape:
            raise ValueError(
                f"mask shape {tuple(self.mask.shape)} != depth shape {tuple(self.depth.shape)}"
            )
        if not torch.isfinite(self.depth).all():
            raise ValueError("depth contains non-finite entries")
        _require_binary(self.mask, "depth mask")
        if bool((self.depth < 0).any()):
            raise ValueError("depth must be non-negative")
        if bool(((self.mask == 0) & (self.depth != 0)).any()):
            raise ValueError("depth must be exactly 0 at invalid pixels")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth.shape[0], self.depth.shape[1]

    @classmethod
    def from_dense(cls, dense: torch.Tensor, keep: torch.Tensor) -> "SparseDepthMap":
        """Subsample a dense depth grid with a binary keep-mask."""
        keep = keep.to(dense.dtype)
        return cls(depth=dense * keep, mask=keep)


@dataclass(frozen=True, eq=False)
class MaskedRGB:
    """RGB image with a binary mask of known pixels; rgb is zeroed where
    the mask is 0 (the network input convention)."""

    rgb: torch.Tensor   # (3, H, W) float in [0, 1]
    mask: torch.Tensor  # (H, W) float, values in {0, 1}

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be (3, H, W), got {tuple(self.rgb.shape)}")
        if self.mask.shape != self.rgb.shape[1:]:
            raise ValueError(
                f"mask shape {tuple(self.mask.shape)} != image shape {tuple(self.rgb.shape[1:])}"
            )
        if not torch.isfinite(self.rgb).all():
            raise ValueError("rgb contains non-finite entries")
        if bool((self.rgb < 0).any()) or bool((self.rgb > 1).any()):
            raise ValueError("rgb values must lie in [0, 1]")
        _require_binary(self.mask, "rgb mask")
        if bool(((self.mask == 0) & (self.rgb != 0).any(dim=0)).any()):
            raise ValueError("rgb must be exactly 0 outside the known mask")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.mask.shape[0], self.mask.shape[1]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A (C, H, W) feature grid (optionally with a leading batch axis) at a
    given pyramid scale; scale_level counts 2x downsamplings from input
    resolution."""

    data: torch.Tensor
    scale_level: int = 0

    def __post_init__(self):
        if self.data.ndim not in (3, 4):
            raise ValueError(f"feature data must be (C,H,W) or (B,C,H,W), got {tuple(self.data.shape)}")
        if min(self.data.shape[-3:]) < 1:
            raise ValueError("feature dims must be >= 1")
        if self.scale_level < 0:
            raise ValueError("scale_level must be >= 0")

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[-2], self.data.shape[-1]


@dataclass(frozen=True)
class LossWeights:
    """Trade-off factors of the total training objective."""

    adv: float = 0.1
    pixel: float = 1.0
    edge: float = 0.5
    cross_modal: float = 0.05

    def __post_init__(self):
        vals = (self.adv, self.pixel, self.edge, self.cross_modal)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


def downsample_mask(mask: torch.Tensor, level: int) -> torch.Tensor:
    """Nearest-neighbor 2^level downsampling of a binary mask.

    Works on any (..., H, W) tensor; picks the top-left sample of each
    block, so repeated single-level calls compose exactly.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    h, w = mask.shape[-2], mask.shape[-1]
    step = 1 << level
    if h % step or w % step:
        raise ValueError(f"mask size {h}x{w} not divisible by 2^{level}")
    _require_binary(mask, "mask")
    if level == 0:
        return mask
    return mask[..., ::step, ::step]


def validate_pair(d: SparseDepthMap, r: MaskedRGB) -> None:
    """Check that a depth/RGB pair is mutually consistent; raises on any
    violation. Run at every dataset load."""
    if d.resolution != r.resolution:
        raise ValueError(f"resolution mismatch: depth {d.resolution} vs rgb {r.resolution}")
    # constructors re-check per-type invariants; enforce them for tensors
    # that may have been mutated in place since construction
    _require_binary(d.mask, "depth mask")
    _require_binary(r.mask, "rgb mask")
    if not torch.isfinite(d.depth).all() or not torch.isfinite(r.rgb).all():
        raise ValueError("non-finite entries")
    if bool(((d.mask == 0) & (d.depth != 0)).any()):
        raise ValueError("depth nonzero under zero mask")
    if bool(((r.mask == 0) & (r.rgb != 0).any(dim=0)).any()):
        raise ValueError("rgb nonzero under zero mask")
    if not is_solid_rectangle(r.mask):
        raise ValueError("known-region mask is not a single solid rectangle")
