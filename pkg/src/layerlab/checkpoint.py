"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"LLAB"                      magic
    uint32  format version       (currently 1)
    uint32  config length N
    N bytes UTF-8 JSON of ModelConfig.to_dict()
    uint32  block count
    per block:
        uint16  name length, name bytes (UTF-8), e.g. "layers.3.attn.q"
        uint8   rank R
        R x uint64 dimensions
        prod(dims) x float64 values, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import Model, ModelConfig, build_model

MAGIC = b"LLAB"
VERSION = 1


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    blocks = model.named_parameters()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(config)))
        fh.write(config)
        fh.write(struct.pack("<I", len(blocks)))
        for name, t in blocks:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return path


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    try:
        fh = path.open("rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError(f"{path} is not a layerlab checkpoint (bad magic)")
        version, clen = struct.unpack("<II", _read(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            config = ModelConfig.from_dict(json.loads(_read(fh, clen).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"corrupt checkpoint config: {exc}") from exc
        (count,) = struct.unpack("<I", _read(fh, 4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", _read(fh, 1))
            shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank))
            size = int(np.prod(shape)) if rank else 1
            arrays[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise CheckpointError("trailing bytes after last parameter block")
    model = build_model(config)
    expected = dict(model.named_parameters())
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(f"parameter blocks do not match config (missing {missing[:5]}, unexpected {extra[:5]})")
    for name, t in expected.items():
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(f"block {name} has shape {arrays[name].shape}, expected {t.data.shape}")
        t.data = arrays[name]
    return model
