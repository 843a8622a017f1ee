"""Binary PGM (P5, maxval 255) reading and writing."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .emulator import to_uint8
from .errors import DataError

_HEADER = re.compile(rb"\AP5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


class PGMError(DataError):
    pass


def encode_pgm(frame: np.ndarray) -> bytes:
    """Serialise an HxW (or HxWx1) frame in [0, 1]; pixels map via floor(p*255 + 0.5)."""
    a = np.asarray(frame)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2:
        raise PGMError(f"PGM holds one channel, got shape {np.shape(frame)}")
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode() + to_uint8(a).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse P5 bytes into an HxW float64 frame in [0, 1]."""
    m = _HEADER.match(data)
    if m is None:
        raise PGMError("not a binary PGM (P5) image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval}")
    if w <= 0 or h <= 0:
        raise PGMError(f"bad PGM size {w}x{h}")
    body = data[m.end():]
    if len(body) < w * h:
        raise PGMError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_pgm(path: str | os.PathLike, frame: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(frame))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing image file: {path}") from None
    try:
        return decode_pgm(data)
    except PGMError as exc:
        raise PGMError(f"{path}: {exc}") from None
