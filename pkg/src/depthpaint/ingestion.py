"""Sample production: LiDAR-style projection, the side-extension layout,
a deterministic synthetic street-scene generator, and on-disk IO.

On-disk sample format (one directory per sample):
  rgb.png    8-bit 3-channel ground truth, H x 2H
  depth.png  16-bit single channel, value = round(meters * 256), 0 = invalid
  meta.json  seed / sparsity / camera intrinsics
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datamodel import MaskedRGB, SparseDepthMap, validate_pair

__all__ = [
    "CameraIntrinsics",
    "PointCloud",
    "Sample",
    "Box2D",
    "SceneGeometry",
    "project_points",
    "make_layout",
    "render_scene",
    "synth_scene",
    "save_sample",
    "load_sample",
]

NEAR_PLANE_M = 0.1          # points at or inside this z are dropped
DEPTH_PNG_SCALE = 256.0     # 16-bit depth encoding: png = round(meters * 256)
DEFAULT_SPARSITY = 0.07     # LiDAR-like fraction of valid depth pixels
BACKDROP_DEPTH_M = 60.0     # far wall closing the scene behind everything
CAMERA_HEIGHT_M = 1.5


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera parameters, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def for_size(cls, height: int, width: int) -> "CameraIntrinsics":
        return cls(fx=float(height), fy=float(height),
                   cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Camera-frame points (x right, y down, z forward), meters."""

    points: torch.Tensor  # (N, 3)

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {tuple(self.points.shape)}")
        if not torch.isfinite(self.points).all():
            raise ValueError("points contain non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


def project_points(cloud: PointCloud, cam: CameraIntrinsics) -> tuple[SparseDepthMap, int]:
    """Project a point cloud through a pinhole camera into a sparse depth map.

    Pixels take the minimum z among colliding points (nearest surface wins,
    so the result is independent of point order). Points behind the near
    plane or outside the image are dropped silently; the drop count is
    returned for diagnostics.
    """
    pts = cloud.points.detach().cpu().numpy().astype(np.float64)
    n = pts.shape[0]
    depth = np.zeros((cam.height, cam.width), dtype=np.float64)
    if n == 0:
        z = torch.zeros(cam.height, cam.width)
        return SparseDepthMap(depth=z, mask=torch.zeros_like(z)), 0

    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    keep = z > NEAR_PLANE_M
    u = np.floor(cam.fx * x[keep] / z[keep] + cam.cx).astype(np.int64)
    v = np.floor(cam.fy * y[keep] / z[keep] + cam.cy).astype(np.int64)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    u, v, zk = u[inside], v[inside], z[keep][inside]
    dropped = int(n - zk.shape[0])

    grid = np.full((cam.height, cam.width), np.inf, dtype=np.float64)
    np.minimum.at(grid, (v, u), zk)
    mask = np.isfinite(grid)
    depth[mask] = grid[mask]
    return (
        SparseDepthMap(depth=torch.from_numpy(depth).float(),
                       mask=torch.from_numpy(mask.astype(np.float32))),
        dropped,
    )


def make_layout(full_rgb: torch.Tensor) -> MaskedRGB:
    """Build the side-extension input: a centered H x H known square inside
    an H x 2H canvas, RGB zeroed outside it."""
    if full_rgb.ndim != 3 or full_rgb.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {tuple(full_rgb.shape)}")
    h, w = full_rgb.shape[1], full_rgb.shape[2]
    if w != 2 * h:
        raise ValueError(f"layout requires W == 2H, got {h}x{w}")
    mask = torch.zeros(h, w, dtype=full_rgb.dtype)
    mask[:, w // 4: 3 * w // 4] = 1.0
    return MaskedRGB(rgb=full_rgb * mask, mask=mask)


@dataclass(frozen=True)
class Box2D:
    """A rendered cuboid face: pixel rect [row0, row1) x [col0, col1) at
    constant depth, plus which outline sides are true object boundaries
    (sides clipped by the canvas are not)."""

    row0: int
    row1: int
    col0: int
    col1: int
    depth_m: float
    color: tuple[float, float, float]
    open_top: bool = False  # True when the top edge was clipped off-canvas


@dataclass(frozen=True)
class SceneGeometry:
    """Exact layout of a synthetic scene, exposed for oracle tests."""

    height: int
    width: int
    horizon_row: int
    boxes: tuple[Box2D, ...] = field(default_factory=tuple)

    def silhouette(self) -> np.ndarray:
        """Rasterize 1-px box outlines (true object boundaries only)."""
        sil = np.zeros((self.height, self.width), dtype=bool)
        for b in self.boxes:
            if not b.open_top:
                sil[b.row0, b.col0:b.col1] = True
            sil[b.row1 - 1, b.col0:b.col1] = True
            sil[b.row0:b.row1, b.col0] = True
            sil[b.row0:b.row1, b.col1 - 1] = True
        return sil


def _luma(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


def _draw_geometry(rng: np.random.Generator, height: int, width: int,
                   cam: CameraIntrinsics) -> SceneGeometry:
    # first row whose pixel center sees the ground nearer than the backdrop
    horizon = int(np.ceil(cam.cy + CAMERA_HEIGHT_M * cam.fy / BACKDROP_DEPTH_M - 0.5))
    n_boxes = int(rng.integers(2, 7))
    # one column slot per box so silhouettes never overlap
    slot = width // n_boxes
    order = rng.permutation(n_boxes)
    boxes = []
    for i in range(n_boxes):
        z = float(rng.uniform(6.0, 40.0))
        box_h = float(rng.uniform(2.0, 7.0))
        row1 = int(np.floor(cam.cy + CAMERA_HEIGHT_M * cam.fy / z - 0.5)) + 1
        row0 = int(np.ceil(cam.cy + (CAMERA_HEIGHT_M - box_h) * cam.fy / z - 0.5))
        open_top = row0 < 0
        row0 = max(row0, 0)
        s0 = int(order[i]) * slot
        margin = max(2, slot // 10)
        wpx = int(rng.integers(max(5, slot // 4), max(6, slot - 2 * margin)))
        c0 = s0 + int(rng.integers(margin, max(margin + 1, slot - margin - wpx)))
        c1 = min(c0 + wpx, width)
        # dark color with luma <= 0.2 so every side contrasts with
        # ground (~0.45) and sky (>= 0.55)
        base = rng.uniform(0.05, 1.0, size=3)
        target = float(rng.uniform(0.06, 0.20))
        color = base * (target / _luma(base))
        color = color / max(1.0, color.max())
        # depth-sorted far-to-near for painter rendering
        boxes.append(Box2D(row0, row1, c0, c1, z, tuple(float(c) for c in color), open_top))
    boxes.sort(key=lambda b: -b.depth_m)
    return SceneGeometry(height=height, width=width, horizon_row=horizon,
                         boxes=tuple(boxes))


def render_scene(seed: int, size: tuple[int, int] = (256, 512),
                 ) -> tuple[np.ndarray, np.ndarray, SceneGeometry]:
    """Render the toy street scene: returns (rgb (3,H,W) in [0,1],
    dense depth (H,W) in meters, geometry). Deterministic in seed."""
    return _render(np.random.default_rng(seed), size)


def _render(rng: np.random.Generator, size: tuple[int, int],
            ) -> tuple[np.ndarray, np.ndarray, SceneGeometry]:
    h, w = size
    if w != 2 * h:
        raise ValueError("scene size must be H x 2H")
    cam = CameraIntrinsics.for_size(h, w)
    geo = _draw_geometry(rng, h, w, cam)

    rgb = np.zeros((3, h, w), dtype=np.float64)
    depth = np.full((h, w), BACKDROP_DEPTH_M, dtype=np.float64)

    # sky/backdrop: gentle vertical gradient
    t = np.linspace(0.0, 1.0, h)[:, None]
    rgb[0] = 0.62 + 0.18 * t
    rgb[1] = 0.72 + 0.12 * t
    rgb[2] = 0.86 + 0.06 * t

    # ground plane below the horizon, shaded darker with distance
    rows = np.arange(geo.horizon_row, h)
    vc = rows + 0.5 - cam.cy
    gdepth = CAMERA_HEIGHT_M * cam.fy / vc
    shade = np.clip(gdepth / BACKDROP_DEPTH_M, 0.0, 1.0)
    ground = np.stack([0.50 - 0.08 * shade, 0.47 - 0.07 * shade, 0.44 - 0.06 * shade])
    rgb[:, rows, :] = ground[:, :, None]
    depth[rows, :] = np.minimum(gdepth, BACKDROP_DEPTH_M)[:, None]

    # cuboids, far to near, with slight vertical facade shading
    for b in geo.boxes:
        fade = np.linspace(1.0, 0.85, b.row1 - b.row0)[:, None]
        for c in range(3):
            rgb[c, b.row0:b.row1, b.col0:b.col1] = b.color[c] * fade
        depth[b.row0:b.row1, b.col0:b.col1] = b.depth_m

    return np.clip(rgb, 0.0, 1.0).astype(np.float32), depth.astype(np.float32), geo


@dataclass(frozen=True, eq=False)
class Sample:
    """One training/eval item: ground truth, the masked input layout, and
    sparse depth covering the full canvas."""

    full_rgb: torch.Tensor       # (3, H, 2H) in [0, 1]
    input_rgb: MaskedRGB
    depth: SparseDepthMap
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_pair(self.depth, self.input_rgb)
        if self.full_rgb.shape != self.input_rgb.rgb.shape:
            raise ValueError("full_rgb / input_rgb shape mismatch")
        if not torch.equal(self.input_rgb.rgb, self.full_rgb * self.input_rgb.mask):
            raise ValueError("input_rgb is not full_rgb masked by the known region")
        known = self.input_rgb.mask.bool()
        valid = self.depth.mask.bool()
        if not bool((valid & known).any()) or not bool((valid & ~known).any()):
            raise ValueError("sparse depth must have valid pixels inside and outside the known region")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth.resolution


def synth_scene(seed: int, sparsity: float = DEFAULT_SPARSITY,
                size: tuple[int, int] = (256, 512)) -> Sample:
    """Deterministic desk-scale sample: rendered scene + Bernoulli-subsampled
    dense depth + the side-extension layout."""
    if not (0.0 < sparsity <= 1.0):
        raise ValueError("sparsity must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    rgb, dense, _ = _render(rng, size)
    # keep-mask drawn from the same seeded stream after the geometry
    keep = (rng.random(size=dense.shape) < sparsity).astype(np.float32)
    full = torch.from_numpy(rgb)
    cam = CameraIntrinsics.for_size(*size)
    return Sample(
        full_rgb=full,
        input_rgb=make_layout(full),
        depth=SparseDepthMap.from_dense(torch.from_numpy(dense), torch.from_numpy(keep)),
        meta={
            "seed": int(seed),
            "sparsity": float(sparsity),
            "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx,
                           "cy": cam.cy, "width": cam.width, "height": cam.height},
        },
    )


def save_sample(sample: Sample, path: str | Path) -> None:
    """Write rgb.png / depth.png / meta.json into the directory `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    rgb8 = np.round(sample.full_rgb.numpy() * 255.0).astype(np.uint8)
    Image.fromarray(rgb8.transpose(1, 2, 0), mode="RGB").save(path / "rgb.png")

    d16 = np.round(sample.depth.depth.numpy() * DEPTH_PNG_SCALE)
    if d16.max() > 65535:
        raise ValueError("depth exceeds the 16-bit PNG range (>= 256 m)")
    valid = sample.depth.mask.numpy() > 0
    if bool((valid & (d16 == 0)).any()):
        raise ValueError("valid depth below format resolution (rounds to 0)")
    Image.fromarray(d16.astype(np.uint16)).save(path / "depth.png")

    with open(path / "meta.json", "w") as fh:
        json.dump(sample.meta, fh, indent=2)


def load_sample(path: str | Path) -> Sample:
    """Read a sample directory written by save_sample; validates the pair."""
    path = Path(path)
    for name in ("rgb.png", "depth.png"):
        if not (path / name).exists():
            raise FileNotFoundError(f"missing {name} in {path}")

    rgb_img = Image.open(path / "rgb.png")
    if rgb_img.mode != "RGB":
        raise ValueError(f"rgb.png has mode {rgb_img.mode}, expected RGB")
    full = torch.from_numpy(
        np.asarray(rgb_img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    )

    d_raw = np.asarray(Image.open(path / "depth.png"))
    if d_raw.ndim != 2:
        raise ValueError("depth.png is not single-channel")
    if d_raw.shape != full.shape[1:]:
        raise ValueError(
            f"depth {d_raw.shape} does not match rgb {tuple(full.shape[1:])}"
        )
    depth = torch.from_numpy(d_raw.astype(np.float32) / DEPTH_PNG_SCALE)
    mask = (depth > 0).float()

    meta = {}
    if (path / "meta.json").exists():
        with open(path / "meta.json") as fh:
            meta = json.load(fh)

    return Sample(
        full_rgb=full,
        input_rgb=make_layout(full),
        depth=SparseDepthMap(depth=depth, mask=mask),
        meta=meta,
    )
