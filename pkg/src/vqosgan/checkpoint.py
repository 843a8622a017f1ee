"""Binary checkpoint format for model parameters.

Layout (all little-endian)::

    b"VQOS" | version u32 | meta_len u32 | meta JSON (utf-8)
    n_tensors u32
    per tensor: name_len u16 | name | rank u8 | dims u32 * rank | float32 data
    crc32 u32 over everything before it

Tensors appear in the model's declaration order, so a round trip through
``save_checkpoint`` / ``load_checkpoint`` is byte-stable.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"VQOS"
VERSION = 1


class CheckpointError(DataError):
    pass


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted or truncated)")
    version, meta_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    try:
        meta = json.loads(body[pos:pos + meta_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint metadata ({exc})") from None
    pos += meta_len
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode()
            pos += name_len
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(body):
                raise CheckpointError(f"tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint ({exc})") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after last tensor")
    return tensors, meta


def state_dict(*modules) -> dict[str, np.ndarray]:
    """Parameters of one or more modules; pass (prefix, module) pairs to namespace them."""
    out: dict[str, np.ndarray] = {}
    for item in modules:
        prefix, mod = item if isinstance(item, tuple) else ("", item)
        for name, p in mod.named_parameters():
            out[f"{prefix}{name}"] = p.data
    return out


def load_state(module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy tensors into a module's parameters (as float64), checking names and shapes."""
    expected = dict(module.named_parameters())
    names = {k[len(prefix):] for k in tensors if k.startswith(prefix)}
    missing = sorted(set(expected) - names)
    extra = sorted(names - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in expected.items():
        arr = tensors[prefix + name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{prefix}{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
        p.data[...] = arr.astype(np.float64)


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, meta))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing checkpoint: {path}") from None
    try:
        return decode_checkpoint(data)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def round_to_f32(module) -> None:
    """Round a module's parameters through float32 so they equal what a checkpoint holds."""
    for _, p in module.named_parameters():
        p.data[...] = p.data.astype(np.float32).astype(np.float64)
