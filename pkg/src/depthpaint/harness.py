"""Training loop, checkpointing, inference, and desk-scale evaluation.

Training alternates one generator step (full weighted objective, with the
adversarial term coming from the conditional hinge discriminator) and one
discriminator step per iteration, two-timescale learning rates. All runs
are deterministic given the seed in the default single-worker mode.
"""
from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import checkpoint as ckpt_io
from .datamodel import LossWeights
from .encoders import DEFAULT_CHANNELS
from .fusion import OutpaintingGenerator
from .ingestion import Sample, load_sample, synth_scene
from .losses import (
    DISC_CHANNELS,
    Discriminator,
    EdgeMap,
    LossParts,
    canny_edges,
    condition_vector,
    cross_modal_loss,
    edge_loss,
    hinge_d_loss,
    hinge_g_loss,
    pixel_loss,
    total_loss,
)

__all__ = [
    "NumericError",
    "TrainConfig",
    "EvalReport",
    "train",
    "infer",
    "evaluate",
    "psnr",
    "montage",
    "build_generator",
    "load_generator",
    "save_generator",
    "collate",
    "load_dataset",
]

UNAVAILABLE_METRICS = ("fid", "lpips", "ap_2d", "ap3d_r40")


class NumericError(RuntimeError):
    """Raised when training hits a non-finite loss; the offending batch is
    dumped for diagnosis instead of being silently skipped."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 200
    batch_size: int = 2
    image_height: int = 256       # canvas is H x 2H
    channel_scale: float = 1.0    # scales the encoder/decoder widths
    kernel_size: int = 3
    g_lr: float = 1e-4
    d_lr: float = 4e-4            # two-timescale rule
    beta1: float = 0.5
    beta2: float = 0.999
    adv_weight: float = 0.1
    pixel_weight: float = 1.0
    edge_weight: float = 0.5
    cross_modal_weight: float = 0.05
    data_dir: str = ""            # when set, load samples from disk
    n_synthetic: int = 8
    data_seed: int = 0
    sparsity: float = 0.07
    use_depth_guidance: bool = True
    use_partial_conv: bool = True
    unknown_weight: float = 5.0
    canny_low: float = 0.1
    canny_high: float = 0.2
    berhu_c: float = 0.2
    checkpoint_every: int = 0     # 0 = final checkpoint only
    image_every: int = 0          # 0 = no montage dumps
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.image_height % 16 or self.image_height <= 0:
            raise ValueError("image_height must be a positive multiple of 16")
        if not self.data_dir and self.n_synthetic <= 0:
            raise ValueError("n_synthetic must be positive without a data_dir")
        self.loss_weights()  # validates non-negativity

    def loss_weights(self) -> LossWeights:
        return LossWeights(adv=self.adv_weight, pixel=self.pixel_weight,
                           edge=self.edge_weight, cross_modal=self.cross_modal_weight)

    def channels(self) -> tuple[int, ...]:
        return tuple(max(1, round(c * self.channel_scale)) for c in DEFAULT_CHANNELS)

    def disc_channels(self) -> tuple[int, ...]:
        return tuple(max(1, round(c * self.channel_scale)) for c in DISC_CHANNELS)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image_height, 2 * self.image_height

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "TrainConfig":
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
        known = {f.name for f in fields(cls)}
        bad = set(cfg) - known
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        if overrides:
            cfg.update(overrides)
        return cls(**cfg)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        return replace(self, **overrides)


def parse_override(token: str, cls=TrainConfig) -> tuple[str, object]:
    """Parse one --key=value config override with dataclass-typed coercion."""
    if not token.startswith("--") or "=" not in token:
        raise ValueError(f"expected --key=value override, got {token!r}")
    key, raw = token[2:].split("=", 1)
    key = key.replace("-", "_")
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ValueError(f"unknown config key {key!r}")
    t = types[key]
    if t in ("int", int):
        return key, int(raw)
    if t in ("float", float):
        return key, float(raw)
    if t in ("bool", bool):
        if raw.lower() in ("1", "true", "yes"):
            return key, True
        if raw.lower() in ("0", "false", "no"):
            return key, False
        raise ValueError(f"bad boolean for {key}: {raw!r}")
    return key, raw


def build_generator(cfg: TrainConfig) -> OutpaintingGenerator:
    return OutpaintingGenerator(channels=cfg.channels(), kernel_size=cfg.kernel_size,
                                use_depth_guidance=cfg.use_depth_guidance,
                                use_partial_conv=cfg.use_partial_conv)


def build_discriminator(cfg: TrainConfig) -> Discriminator:
    return Discriminator(channels=cfg.disc_channels(), cond_dim=cfg.channels()[-1])


def generator_meta(cfg: TrainConfig) -> dict:
    return {
        "kind": "generator",
        "channels": list(cfg.channels()),
        "kernel_size": cfg.kernel_size,
        "use_depth_guidance": cfg.use_depth_guidance,
        "use_partial_conv": cfg.use_partial_conv,
        "image_height": cfg.image_height,
    }


def save_generator(path: str | Path, gen: OutpaintingGenerator, meta: dict) -> None:
    params = {name: p for name, p in gen.named_parameters()}
    ckpt_io.save_checkpoint(path, meta, params)


def load_generator(path: str | Path) -> tuple[OutpaintingGenerator, dict]:
    meta, params = ckpt_io.load_checkpoint(path)
    if meta.get("kind") != "generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    gen = OutpaintingGenerator(channels=tuple(meta["channels"]),
                               kernel_size=meta["kernel_size"],
                               use_depth_guidance=meta["use_depth_guidance"],
                               use_partial_conv=meta["use_partial_conv"])
    own = dict(gen.named_parameters())
    if set(own) != set(params):
        raise ValueError("checkpoint parameter table does not match the model")
    with torch.no_grad():
        for name, p in own.items():
            if p.shape != params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            p.copy_(params[name])
    return gen, meta


def load_dataset(cfg: TrainConfig) -> list[Sample]:
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"data_dir {root} does not exist")
        dirs = sorted(p for p in root.iterdir() if (p / "rgb.png").exists())
        if not dirs:
            raise ValueError(f"no sample directories under {root}")
        return [load_sample(p) for p in dirs]
    return [synth_scene(cfg.data_seed + i, cfg.sparsity, cfg.image_size)
            for i in range(cfg.n_synthetic)]


def collate(samples: list[Sample]) -> dict[str, torch.Tensor]:
    """Stack samples into batched training tensors."""
    return {
        "depth": torch.stack([s.depth.depth for s in samples]).unsqueeze(1),
        "depth_mask": torch.stack([s.depth.mask for s in samples]).unsqueeze(1),
        "rgb_in": torch.stack([s.input_rgb.rgb for s in samples]),
        "known_mask": torch.stack([s.input_rgb.mask for s in samples]).unsqueeze(1),
        "full": torch.stack([s.full_rgb for s in samples]),
    }


def _dump_batch(out_dir: Path, step: int, batch: dict, message: str) -> Path:
    dump = out_dir / f"diagnostic_step{step:06d}.npz"
    np.savez(dump, **{k: v.detach().numpy() for k, v in batch.items()})
    (out_dir / f"diagnostic_step{step:06d}.txt").write_text(message + "\n")
    return dump


def train(cfg: TrainConfig) -> list[Path]:
    """Run the adversarial training loop; returns checkpoint paths in the
    order written (the final checkpoint is always last)."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)

    dataset = load_dataset(cfg)
    gen = build_generator(cfg)
    disc = build_discriminator(cfg)
    g_opt = torch.optim.Adam(gen.parameters(), lr=cfg.g_lr, betas=(cfg.beta1, cfg.beta2))
    d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.d_lr, betas=(cfg.beta1, cfg.beta2))
    weights = cfg.loss_weights()
    sampler = torch.Generator().manual_seed(cfg.seed)

    ckpt_paths: list[Path] = []
    meta = generator_meta(cfg)
    csv_path = out_dir / "losses.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "g_total", "g_adv", "g_pixel", "g_edge",
                         "g_cross_modal", "d_loss"])

        for step in range(1, cfg.steps + 1):
            idx = torch.randint(len(dataset), (cfg.batch_size,), generator=sampler)
            batch = collate([dataset[i] for i in idx.tolist()])

            # generator step
            out = gen(batch["depth"], batch["depth_mask"],
                      batch["rgb_in"], batch["known_mask"])
            cond = condition_vector(out.rgb_bottleneck, out.known_mask_bottleneck)
            parts = LossParts(
                adv=hinge_g_loss(disc(out.composited, batch["known_mask"], cond)),
                pixel=pixel_loss(out.prediction, batch["full"], batch["known_mask"],
                                 cfg.unknown_weight),
                edge=edge_loss(out.composited, batch["full"],
                               cfg.canny_low, cfg.canny_high, cfg.berhu_c),
                cross_modal=cross_modal_loss(out.depth_bottleneck, out.rgb_bottleneck,
                                             out.depth_mask_bottleneck,
                                             out.known_mask_bottleneck),
            )
            g_total = total_loss(parts, weights)
            if not torch.isfinite(g_total):
                dump = _dump_batch(out_dir, step, batch,
                                   f"non-finite generator loss at step {step}")
                raise NumericError(f"non-finite generator loss at step {step}; batch dumped to {dump}")
            g_opt.zero_grad(set_to_none=True)
            g_total.backward()
            g_opt.step()

            # discriminator step on fresh scores, fake detached
            d_real = disc(batch["full"], batch["known_mask"], cond)
            d_fake = disc(out.composited.detach(), batch["known_mask"], cond)
            d_loss = hinge_d_loss(d_real, d_fake)
            if not torch.isfinite(d_loss):
                dump = _dump_batch(out_dir, step, batch,
                                   f"non-finite discriminator loss at step {step}")
                raise NumericError(f"non-finite discriminator loss at step {step}; batch dumped to {dump}")
            d_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            d_opt.step()

            writer.writerow([step, float(g_total), float(parts.adv), float(parts.pixel),
                             float(parts.edge), float(parts.cross_modal), float(d_loss)])

            if cfg.image_every and step % cfg.image_every == 0:
                montage_from_tensors(batch, out.composited.detach(),
                                     out_dir / f"montage_step{step:06d}.png")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.steps:
                path = out_dir / f"ckpt_step{step:06d}.dpck"
                save_generator(path, gen, {**meta, "step": step})
                ckpt_paths.append(path)

    final = out_dir / "ckpt_final.dpck"
    save_generator(final, gen, {**meta, "step": cfg.steps})
    ckpt_paths.append(final)
    return ckpt_paths


def infer(checkpoint: str | Path, sample: Sample) -> tuple[torch.Tensor, EdgeMap]:
    """Deterministic forward pass of a checkpointed generator on one sample;
    returns the composited prediction and its Canny edge map."""
    gen, _ = load_generator(checkpoint)
    gen.eval()
    with torch.no_grad():
        out = gen.outpaint(sample.depth, sample.input_rgb)
    return out.composited, canny_edges(out.composited)


def psnr(pred: torch.Tensor, gt: torch.Tensor,
         region_mask: torch.Tensor | None = None) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; identical inputs
    report math.inf."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    diff = (pred - gt) ** 2
    if region_mask is not None:
        m = region_mask.to(pred.dtype)
        while m.ndim < pred.ndim:
            m = m.unsqueeze(0)
        total = m.expand_as(diff).sum()
        if float(total) == 0:
            raise ValueError("empty evaluation region")
        mse = float((diff * m).sum() / total)
    else:
        mse = float(diff.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def edge_f1(pred_edges: torch.Tensor, gt_edges: torch.Tensor) -> float:
    """F1 between binary edge maps; two empty maps count as perfect."""
    a = pred_edges.bool()
    b = gt_edges.bool()
    tp = float((a & b).sum())
    fp = float((a & ~b).sum())
    fn = float((~a & b).sum())
    if tp == fp == fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


@dataclass(eq=False)
class EvalReport:
    """Per-sample and aggregate desk-scale metrics. Paper-style metrics that
    need external pretrained networks are reported as unavailable rather
    than approximated."""

    per_sample: list[dict]
    aggregate: dict
    unavailable: tuple = UNAVAILABLE_METRICS

    def to_json(self, path: str | Path) -> None:
        payload = {
            "aggregate": self.aggregate,
            "unavailable": {k: "unavailable" for k in self.unavailable},
            "per_sample": self.per_sample,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2))

    def to_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.per_sample[0]))
            writer.writeheader()
            writer.writerows(self.per_sample)


def evaluate(checkpoint: str | Path, samples: list[Sample],
             report_path: str | Path | None = None) -> EvalReport:
    """PSNR (full + unknown-region) and Canny-edge F1 over a dataset."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    gen, _ = load_generator(checkpoint)
    gen.eval()
    rows = []
    for i, s in enumerate(samples):
        with torch.no_grad():
            out = gen.outpaint(s.depth, s.input_rgb)
        pred = out.composited
        unknown = 1.0 - s.input_rgb.mask
        rows.append({
            "index": i,
            "psnr_full": psnr(pred, s.full_rgb),
            "psnr_unknown": psnr(pred, s.full_rgb, unknown),
            "edge_f1": edge_f1(canny_edges(pred).edges, canny_edges(s.full_rgb).edges),
            "depth_valid_fraction": float(s.depth.mask.mean()),
            "known_fraction": float(s.input_rgb.mask.mean()),
        })
    keys = ("psnr_full", "psnr_unknown", "edge_f1", "depth_valid_fraction",
            "known_fraction")
    aggregate = {k: sum(r[k] for r in rows) / len(rows) for k in keys}
    aggregate["n_samples"] = len(rows)
    report = EvalReport(per_sample=rows, aggregate=aggregate)
    if report_path is not None:
        report_path = Path(report_path)
        report.to_json(report_path)
        report.to_csv(report_path.with_suffix(".csv"))
    return report


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().clamp(0, 1).numpy()
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def montage_from_tensors(batch: dict, preds: torch.Tensor, path: str | Path,
                         max_rows: int = 4) -> None:
    """PNG grid, one row per sample: masked input | prediction | ground
    truth | prediction edge map."""
    rows = []
    n = min(preds.shape[0], max_rows)
    for i in range(n):
        edges = canny_edges(preds[i]).edges
        panels = [
            _to_uint8(batch["rgb_in"][i]),
            _to_uint8(preds[i]),
            _to_uint8(batch["full"][i]),
            _to_uint8(edges.unsqueeze(0).expand(3, -1, -1)),
        ]
        rows.append(np.concatenate(panels, axis=1))
    grid = np.concatenate(rows, axis=0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="RGB").save(path)


def montage(checkpoint: str | Path, samples: list[Sample], path: str | Path,
            max_rows: int = 4) -> None:
    """Render input/prediction/GT/edge panels for up to max_rows samples."""
    if not samples:
        raise ValueError("no samples to montage")
    gen, _ = load_generator(checkpoint)
    gen.eval()
    subset = samples[:max_rows]
    preds = []
    for s in subset:
        with torch.no_grad():
            preds.append(gen.outpaint(s.depth, s.input_rgb).composited)
    batch = collate(subset)
    montage_from_tensors(batch, torch.stack(preds), path, max_rows)
