"""Binary parameter snapshots.

Layout (little-endian)::

    b"CGRU"  u16 version
    u32 config length, UTF-8 "key = value" lines echoing the ModelConfig
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u32 rows, u32 cols,
                rows*cols float32 values, row-major
"""
from __future__ import annotations

import struct

import numpy as np

from ..model import CGRUDecoder, ModelConfig, param_shapes
from ..numerics import Parameter
from .config import format_config, parse_config_text

MAGIC = b"CGRU"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def checkpoint_bytes(model: CGRUDecoder) -> bytes:
    cfg_text = format_config(model.cfg.to_dict()).encode("utf-8")
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg_text)), cfg_text,
           struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        rows, cols = p.shape
        out += [struct.pack("<H", len(raw)), raw, struct.pack("<II", rows, cols),
                np.ascontiguousarray(p.value, dtype="<f4").tobytes()]
    return b"".join(out)


def checkpoint_save(model: CGRUDecoder, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path, config: ModelConfig | None = None) -> CGRUDecoder:
    """Load a checkpoint; with ``config`` every tensor shape must match it."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    try:
        echo = ModelConfig.from_dict(parse_config_text(r.take(cfg_len).decode("utf-8")))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from None
    cfg = config if config is not None else echo
    expected = param_shapes(cfg)
    if config is not None and expected != param_shapes(echo):
        raise CheckpointError(f"{path}: checkpoint was saved with a different model configuration")
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} tensors, configuration expects {len(expected)}")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8", errors="replace")
        rows, cols = r.unpack("<II")
        if expected.get(name) != (rows, cols):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {(rows, cols)}, expected {expected.get(name)}")
        data = np.frombuffer(r.take(4 * rows * cols), dtype="<f4").reshape(rows, cols)
        params[name] = Parameter(name, data.astype(cfg.np_dtype))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return CGRUDecoder(cfg, {k: params[k] for k in expected})
