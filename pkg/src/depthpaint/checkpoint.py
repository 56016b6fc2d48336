"""Checkpoint container: a single binary file with a versioned header,
a JSON metadata block (model hyperparameters), and a table of named
float32 little-endian parameter payloads.

Layout:
  magic "DPCK" | version u32 | meta_len u32 | meta JSON (utf-8)
  | count u32 | count * (name_len u16, name utf-8, ndim u8, ndim * dim u32)
  | payloads (float32 LE, entry order)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"DPCK"
VERSION = 1


def save_checkpoint(path: str | Path, meta: dict,
                    params: dict[str, torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    meta_json = json.dumps(meta, sort_keys=True).encode("utf-8")

    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<I", len(meta_json))
    header += meta_json
    header += struct.pack("<I", len(names))
    payloads = []
    for name in names:
        t = params[name].detach().cpu()
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw))
        header += raw
        header += struct.pack("<B", t.ndim)
        header += struct.pack(f"<{t.ndim}I", *t.shape) if t.ndim else b""
        payloads.append(np.ascontiguousarray(t.numpy(), dtype="<f4").tobytes())

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for p in payloads:
            fh.write(p)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    off = 4

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated header")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len

    (count,) = take("<I")
    entries = []
    for _ in range(count):
        (name_len,) = take("<H")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        entries.append((name, shape))

    params = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if off + nbytes > len(blob):
            raise ValueError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        params[name] = torch.from_numpy(arr.copy())
        off += nbytes
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return meta, params
