"""Training objectives: cross-modal attention transfer, Canny+Berhu edge
loss, conditional hinge adversarial loss, weighted pixel L1, and the
weighted total.

The Canny extraction is inherently non-differentiable; the edge loss
therefore compares Gaussian-blurred binary edge maps and routes its
gradient straight through to the prediction's luma at the disagreement
locations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .datamodel import FeatureMap, LossWeights, is_binary_mask

__all__ = [
    "EdgeMap",
    "Discriminator",
    "LossParts",
    "attention_map",
    "cross_modal_loss",
    "canny_edges",
    "berhu",
    "edge_loss",
    "hinge_d_loss",
    "hinge_g_loss",
    "pixel_loss",
    "total_loss",
    "condition_vector",
    "luma",
]

DEFAULT_CANNY_LOW = 0.1
DEFAULT_CANNY_HIGH = 0.2
DEFAULT_BERHU_C = 0.2
DEFAULT_UNKNOWN_WEIGHT = 5.0

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


@dataclass(frozen=True, eq=False)
class EdgeMap:
    """Binary edge grid."""

    edges: torch.Tensor  # (H, W), values in {0, 1}

    def __post_init__(self):
        if self.edges.ndim != 2:
            raise ValueError(f"edges must be 2-D, got {tuple(self.edges.shape)}")
        if not is_binary_mask(self.edges):
            raise ValueError("edge map must be binary")


def _data(f: torch.Tensor | FeatureMap) -> torch.Tensor:
    return f.data if isinstance(f, FeatureMap) else f


def luma(img: torch.Tensor) -> torch.Tensor:
    """Rec.601 grayscale of a (..., 3, H, W) image."""
    if img.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got {img.shape[-3]}")
    r, g, b = img.unbind(dim=-3)
    return 0.299 * r + 0.587 * g + 0.114 * b


def attention_map(f: torch.Tensor | FeatureMap) -> torch.Tensor:
    """Per-pixel mean of squared channel values: (..., C, H, W) -> (..., 1, H, W)."""
    x = _data(f)
    return x.square().mean(dim=-3, keepdim=True)


def cross_modal_loss(f_d: torch.Tensor | FeatureMap, f_r: torch.Tensor | FeatureMap,
                     depth_valid_mask: torch.Tensor,
                     known_mask: torch.Tensor) -> torch.Tensor:
    """L2 distance between masked attention maps of the two branches inside
    the unknown region. The depth side is detached: it teaches, the RGB
    side learns.
    """
    xd = _data(f_d).detach()
    xr = _data(f_r)
    if xd.shape != xr.shape:
        raise ValueError(f"feature shapes differ: {tuple(xd.shape)} vs {tuple(xr.shape)}")
    valid = depth_valid_mask.to(xd.dtype)
    known = known_mask.to(xd.dtype)
    unknown = 1.0 - known
    a_d = attention_map(xd * unknown)
    a_r = attention_map(xr * valid * unknown)
    diff = a_d - a_r
    if diff.ndim == 4:
        return torch.linalg.vector_norm(diff, dim=(1, 2, 3)).mean()
    return torch.linalg.vector_norm(diff)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - size // 2
    xx, yy = np.meshgrid(ax, ax)
    g = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _nms(mag: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Non-maximum suppression along the quantized gradient direction.

    Ties on two-pixel plateaus break toward the first pixel (strict test
    against one neighbor, non-strict against the other), so an ideal step
    yields a single-pixel line.
    """
    deg = np.degrees(angle) % 180.0
    h, w = mag.shape
    padded = np.zeros((h + 2, w + 2), dtype=mag.dtype)
    padded[1:-1, 1:-1] = mag

    def shifted(dr: int, dc: int) -> np.ndarray:
        return padded[1 + dr:h + 1 + dr, 1 + dc:w + 1 + dc]

    # (strict neighbor, non-strict neighbor) per direction bin
    bins = [
        ((deg < 22.5) | (deg >= 157.5), (0, -1), (0, 1)),    # horizontal gradient
        ((deg >= 22.5) & (deg < 67.5), (1, -1), (-1, 1)),    # 45 degrees
        ((deg >= 67.5) & (deg < 112.5), (-1, 0), (1, 0)),    # vertical gradient
        ((deg >= 112.5) & (deg < 157.5), (-1, -1), (1, 1)),  # 135 degrees
    ]
    keep = np.zeros_like(mag, dtype=bool)
    for sel, a, b in bins:
        keep |= sel & (mag > shifted(*a)) & (mag >= shifted(*b))
    return np.where(keep, mag, 0.0)


def canny_edges(img: torch.Tensor | np.ndarray,
                low: float = DEFAULT_CANNY_LOW,
                high: float = DEFAULT_CANNY_HIGH) -> EdgeMap:
    """Classic Canny on a (3, H, W) image in [0, 1]: luma, 5x5 Gaussian blur
    (sigma 1.4), Sobel gradients, direction-quantized NMS, then
    double-threshold hysteresis (8-connected). Deterministic."""
    if not (0.0 <= low < high):
        raise ValueError(f"thresholds must satisfy 0 <= low < high, got {low}, {high}")
    if isinstance(img, torch.Tensor):
        arr = img.detach().cpu().numpy()
    else:
        arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {arr.shape}")

    gray = 0.299 * arr[0] + 0.587 * arr[1] + 0.114 * arr[2]
    smooth = ndimage.convolve(gray.astype(np.float64),
                              _gaussian_kernel(5, 1.4), mode="reflect")
    gx = ndimage.convolve(smooth, _SOBEL_X, mode="reflect")
    gy = ndimage.convolve(smooth, _SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy)
    nms = _nms(mag, np.arctan2(gy, gx))

    strong = nms >= high
    candidate = nms >= low
    labels, n = ndimage.label(candidate, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        edges = np.zeros_like(strong)
    else:
        strong_ids = np.unique(labels[strong])
        strong_ids = strong_ids[strong_ids > 0]
        edges = np.isin(labels, strong_ids) & candidate
    return EdgeMap(edges=torch.from_numpy(edges.astype(np.float32)))


def berhu(x: torch.Tensor, c: float) -> torch.Tensor:
    """Reverse-Huber penalty, averaged over entries: |x| below c, quadratic
    (x^2 + c^2) / (2c) above; C1-continuous at |x| = c."""
    if c <= 0:
        raise ValueError("berhu threshold c must be > 0")
    ax = x.abs()
    return torch.where(ax <= c, ax, (x * x + c * c) / (2.0 * c)).mean()


def _blurred_edges(img: torch.Tensor, low: float, high: float,
                   blur_sigma: float) -> torch.Tensor:
    e = canny_edges(img, low, high).edges.numpy().astype(np.float64)
    soft = ndimage.convolve(e, _gaussian_kernel(5, blur_sigma), mode="reflect")
    return torch.from_numpy(soft).to(img.dtype)


def edge_loss(pred: torch.Tensor, gt: torch.Tensor,
              low: float = DEFAULT_CANNY_LOW, high: float = DEFAULT_CANNY_HIGH,
              c: float = DEFAULT_BERHU_C, blur_sigma: float = 1.0) -> torch.Tensor:
    """Berhu distance between blurred Canny maps of prediction and ground
    truth. Forward value uses the true edge maps; the gradient is routed
    straight through to the prediction's luma, so training pressure lands
    on the pixels at edge-disagreement locations."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    preds = pred.unsqueeze(0) if pred.ndim == 3 else pred
    gts = gt.unsqueeze(0) if gt.ndim == 3 else gt
    diffs = []
    for p, g in zip(preds, gts):
        e_p = _blurred_edges(p.detach(), low, high, blur_sigma)
        e_g = _blurred_edges(g.detach(), low, high, blur_sigma)
        carrier = luma(p)
        # forward value is exactly e_p - e_g; the zero-valued carrier term
        # routes a unit gradient to the prediction's luma
        diffs.append((e_p - e_g) + (carrier - carrier.detach()))
    return berhu(torch.stack(diffs), c)


def hinge_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge: mean(relu(1 - real)) + mean(relu(1 + fake))."""
    return F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()


def hinge_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Generator hinge: -mean(fake score)."""
    return -d_fake.mean()


def pixel_loss(pred: torch.Tensor, gt: torch.Tensor, known_mask: torch.Tensor,
               unknown_weight: float = DEFAULT_UNKNOWN_WEIGHT) -> torch.Tensor:
    """Weighted mean absolute error; unknown-region pixels weigh
    unknown_weight times the known region."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    m = known_mask.to(pred.dtype)
    while m.ndim < pred.ndim:
        m = m.unsqueeze(0)
    w = m + unknown_weight * (1.0 - m)
    num = (w * (pred - gt).abs()).sum()
    den = w.expand_as(pred).sum()
    return num / den


class LossParts(NamedTuple):
    """The four scalar objective terms, pre-weighting."""

    adv: torch.Tensor | float
    pixel: torch.Tensor | float
    edge: torch.Tensor | float
    cross_modal: torch.Tensor | float


def total_loss(parts: LossParts, w: LossWeights):
    """Weighted sum of the objective terms."""
    return (w.adv * parts.adv + w.pixel * parts.pixel
            + w.edge * parts.edge + w.cross_modal * parts.cross_modal)


def condition_vector(rgb_bottleneck: torch.Tensor,
                     known_mask_bottleneck: torch.Tensor) -> torch.Tensor:
    """Mean-pool the bottleneck RGB features over the known region:
    (B, C, h, w) -> (B, C). Detached: a conditioning signal, not a
    gradient pathway."""
    f = rgb_bottleneck
    m = known_mask_bottleneck.to(f.dtype)
    if f.ndim == 3:
        f = f.unsqueeze(0)
    while m.ndim < 4:
        m = m.unsqueeze(0)
    pooled = (f * m).sum(dim=(2, 3)) / m.sum(dim=(2, 3)).clamp(min=1.0)
    return pooled.detach()


class SpectralNorm(nn.Module):
    """Weight parametrization dividing by the top singular value, estimated
    by power iteration run to stagnation on every training-mode access.

    Iterating to convergence (rather than a fixed single step) keeps the
    normalized weight's true spectral norm within ~1e-5 of 1 even right
    after an optimizer step, instead of drifting several percent.
    """

    def __init__(self, weight: torch.Tensor, tol: float = 1e-6,
                 max_iterations: int = 200):
        super().__init__()
        self.tol = tol
        self.max_iterations = max_iterations
        flat = weight.detach().reshape(weight.shape[0], -1)
        self.register_buffer("u", F.normalize(torch.randn(flat.shape[0]), dim=0))
        self.register_buffer("v", F.normalize(torch.randn(flat.shape[1]), dim=0))
        with torch.no_grad():
            self._iterate(flat)

    def _iterate(self, m: torch.Tensor) -> None:
        u, v = self.u, self.v
        last = None
        for _ in range(self.max_iterations):
            v = F.normalize(m.t() @ u, dim=0)
            u = F.normalize(m @ v, dim=0)
            sigma = float(u @ (m @ v))
            if last is not None and abs(sigma - last) <= self.tol * max(abs(sigma), 1e-12):
                break
            last = sigma
        self.u.copy_(u)
        self.v.copy_(v)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        m = w.reshape(w.shape[0], -1)
        if self.training:
            with torch.no_grad():
                self._iterate(m.detach())
        # sigma keeps the autograd graph through w (u, v act as constants)
        sigma = self.u @ (m @ self.v)
        return w / sigma


def _spectral(module: nn.Module) -> nn.Module:
    nn.utils.parametrize.register_parametrization(module, "weight",
                                                  SpectralNorm(module.weight))
    return module


def spectral_sigma_estimates(module: nn.Module, iters: int = 10) -> dict[str, float]:
    """Power-iteration estimates of the top singular value of every
    spectrally-normalized weight in `module`, warm-started from each
    layer's own iteration state."""
    out = {}
    was_training = module.training
    module.eval()
    with torch.no_grad():
        for name, sub in module.named_modules():
            if not nn.utils.parametrize.is_parametrized(sub, "weight"):
                continue
            norms = [p for p in sub.parametrizations["weight"] if isinstance(p, SpectralNorm)]
            if not norms:
                continue
            w = sub.weight.detach()
            m = w.reshape(w.shape[0], -1).double()
            u = norms[0].u.detach().double()
            v = None
            for _ in range(iters):
                v = F.normalize(m.t() @ u, dim=0)
                u = F.normalize(m @ v, dim=0)
            out[name] = float(u @ (m @ v))
    if was_training:
        module.train()
    return out


DISC_CHANNELS = (64, 128, 256, 256)


class Discriminator(nn.Module):
    """Spectrally-normalized conv stack over (rgb + known-mask) inputs with
    a projection conditioning head: score = linear(sum-pooled features)
    + <cond, proj(sum-pooled features)>."""

    def __init__(self, channels: tuple[int, ...] = DISC_CHANNELS,
                 cond_dim: int = 256):
        super().__init__()
        self.cond_dim = cond_dim
        widths = (4,) + tuple(channels)
        self.convs = nn.ModuleList(
            _spectral(nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1))
            for i in range(len(channels)))
        self.head = _spectral(nn.Linear(channels[-1], 1))
        self.proj = _spectral(nn.Linear(channels[-1], cond_dim))

    def forward(self, img: torch.Tensor, known_mask: torch.Tensor,
                cond: torch.Tensor | None = None) -> torch.Tensor:
        x = img.unsqueeze(0) if img.ndim == 3 else img
        squeeze = img.ndim == 3
        m = known_mask.to(x.dtype)
        while m.ndim < 4:
            m = m.unsqueeze(0)
        if m.shape[0] == 1 and x.shape[0] > 1:
            m = m.expand(x.shape[0], -1, -1, -1)
        x = torch.cat([x, m], dim=1)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        pooled = x.sum(dim=(2, 3))
        score = self.head(pooled).squeeze(-1)
        if cond is not None:
            if cond.ndim == 1:
                cond = cond.unsqueeze(0)
            if cond.shape[-1] != self.cond_dim:
                raise ValueError(
                    f"condition vector length {cond.shape[-1]} != head dim {self.cond_dim}"
                )
            score = score + (cond * self.proj(pooled)).sum(dim=-1)
        return score.squeeze(0) if squeeze else score
