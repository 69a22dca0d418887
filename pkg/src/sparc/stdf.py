"""STDF-v1 weights container.

Byte layout (all integers little-endian)::

    b"STDF1"                          5-byte magic
    u32   meta_len
    meta  meta_len bytes of UTF-8 JSON:
          {"format": "STDF", "version": 1, "config": {ModelConfig fields}}
    u32   tensor_count
    repeated tensor_count times:
        u16   name_len
        name  name_len bytes of UTF-8
        u8    rank
        u32   dims[rank]
        f32   data[prod(dims)]        row-major

Tensors are written in ``ModelWeights.named_tensors()`` order.
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelWeights

MAGIC = b"STDF1"
VERSION = 1


def dump_weights(weights: ModelWeights, stream: BinaryIO) -> None:
    meta = json.dumps(
        {"format": "STDF", "version": VERSION, "config": weights.config.to_dict()},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    tensors = weights.named_tensors()
    stream.write(MAGIC)
    stream.write(struct.pack("<I", len(meta)))
    stream.write(meta)
    stream.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw_name = name.encode("utf-8")
        stream.write(struct.pack("<H", len(raw_name)))
        stream.write(raw_name)
        stream.write(struct.pack("<B", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps_weights(weights: ModelWeights) -> bytes:
    buf = io.BytesIO()
    dump_weights(weights, buf)
    return buf.getvalue()


def _read(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError("unexpected end of container")
    return data


def load_weights(stream: BinaryIO) -> tuple[ModelConfig, ModelWeights]:
    """Parse an STDF-v1 container into a validated config and weights."""
    if _read(stream, len(MAGIC)) != MAGIC:
        raise FormatError("bad magic: not an STDF1 container")
    (meta_len,) = struct.unpack("<I", _read(stream, 4))
    try:
        meta = json.loads(_read(stream, meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}") from exc
    if meta.get("format") != "STDF" or meta.get("version") != VERSION:
        raise FormatError(f"unsupported format/version: {meta.get('format')}/{meta.get('version')}")
    config = ModelConfig.from_dict(meta.get("config", {}))

    (count,) = struct.unpack("<I", _read(stream, 4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read(stream, 2))
        name = _read(stream, name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", _read(stream, 1))
        dims = struct.unpack(f"<{rank}I", _read(stream, 4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(_read(stream, 4 * n), dtype="<f4").reshape(dims)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = data
    if stream.read(1):
        raise FormatError("trailing bytes after last tensor")
    weights = ModelWeights.from_named(config, tensors)
    return config, weights


def read_weights_file(path) -> tuple[ModelConfig, ModelWeights]:
    with open(path, "rb") as fh:
        return load_weights(fh)


def write_weights_file(weights: ModelWeights, path) -> None:
    with open(path, "wb") as fh:
        dump_weights(weights, fh)


__all__ = ["MAGIC", "VERSION", "dump_weights", "dumps_weights", "load_weights",
           "read_weights_file", "write_weights_file"]
