"""Deterministic network-degradation emulator.

A frame is encoded with a block quantizer whose step depends on the data-rate
class, the byte stream is split into MTU-sized packets, a loss process drops
some of them. The decoder shows a block exactly when all of its bytes arrived,
flat at its base level when only its two leading bytes arrived, and conceals it
otherwise.

Encoded stream layout (little-endian)::

    header   "VQEB" | version u8 | width u16 | height u16 | channels u8
             | block u8 | q u16 | block_count u32
    per block (channel-major, then block rows, then block columns):
             base u8 | n_runs u8 | n_runs x (level u8, run u8)

A record with ``n_runs == 0`` is a flat block whose pixels all equal ``base``
exactly. Otherwise pixels are posterized on the absolute grid of step ``q``:
``level = round(pixel / q)``, ``base`` is the smallest level in the block, runs
carry ``level - base`` and the decoder emits ``min(255, (base + level) * q)``.
The per-pixel error therefore never exceeds ``q / 2``. Rates whose step
exceeds ``RateConfig.detail_max_q`` send every non-constant block as a flat
record holding its mean snapped to the grid.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError

MAGIC = b"VQEB"
VERSION = 1
HEADER = struct.Struct("<4sBHHBBHI")
PACKET_HEADER_SIZE = 12  # seq u32 | frame_id u32 | offset u32

DEFAULT_RATES = (1200, 1600)
DEFAULT_LOSSES = (0.05, 0.10, 0.25)
GRAY = 0.5


class EmulatorError(DataError):
    pass


# ---------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class NetworkState:
    """A (data-rate class in kbps, packet-loss class in percent) label."""

    data_rate: float
    packet_loss: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.data_rate, self.packet_loss)

    def __str__(self) -> str:
        return f"{format_class(self.data_rate)} kbps / {format_class(self.packet_loss)} %"


def format_class(value: float) -> str:
    """Canonical short text for a class value: 1600 -> '1600', 0.1 -> '0.1'."""
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


@dataclass(frozen=True)
class LossModel:
    kind: str = "bernoulli"
    p: float = 0.0
    p_good_to_bad: float = 0.0
    p_bad_to_good: float = 1.0
    loss_in_bad: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "gilbert_elliott"):
            raise EmulatorError(f"unknown loss model {self.kind!r}")
        for name in ("p", "p_good_to_bad", "p_bad_to_good", "loss_in_bad"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise EmulatorError(f"{name}={v} outside [0, 1]")

    @classmethod
    def gilbert_elliott(cls, p_good_to_bad: float, p_bad_to_good: float, loss_in_bad: float = 1.0) -> "LossModel":
        return cls("gilbert_elliott", 0.0, p_good_to_bad, p_bad_to_good, loss_in_bad)

    @classmethod
    def bursty(cls, rate: float, mean_burst: float = 4.0) -> "LossModel":
        """Gilbert-Elliott chain with lossless good state and the given stationary rate."""
        if mean_burst < 1.0:
            raise EmulatorError("mean_burst must be >= 1")
        p_bg = 1.0 / mean_burst
        if rate >= 1.0:
            return cls.gilbert_elliott(1.0, 0.0)
        return cls.gilbert_elliott(min(1.0, rate * p_bg / (1.0 - rate)), p_bg)

    @property
    def stationary_rate(self) -> float:
        if self.kind == "bernoulli":
            return self.p
        denom = self.p_good_to_bad + self.p_bad_to_good
        if denom == 0.0:
            return 0.0
        return self.p_good_to_bad / denom * self.loss_in_bad


def _default_q_table(rates: Sequence[float]) -> dict[float, int]:
    # anchored at q(1600) = 4, q(1200) = 40, geometric in between and beyond
    table = {}
    for r in rates:
        q = 4.0 * 10.0 ** ((1600.0 - float(r)) / 400.0)
        table[float(r)] = int(min(255, max(1, round(q))))
    return table


@dataclass(frozen=True)
class RateConfig:
    """Data-rate class -> quantizer step, plus block size, MTU and loss scaling.

    ``loss_scale`` converts a loss class in percent into the per-packet drop
    probability used by the emulator: ``p = loss / 100 * loss_scale``.

    Rates whose step exceeds ``detail_max_q`` drop intra-block detail: every
    block is sent as one value, its mean snapped to the quantizer grid.
    """

    q_table: Mapping[float, int] = field(default_factory=lambda: _default_q_table(DEFAULT_RATES))
    block: int = 2
    mtu: int = 16
    loss_scale: float = 150.0
    detail_max_q: int = 16

    def __post_init__(self):
        table = {float(k): int(v) for k, v in dict(self.q_table).items()}
        object.__setattr__(self, "q_table", table)
        if not 1 <= self.block <= 15:
            raise EmulatorError(f"block size {self.block} outside [1, 15]")
        if self.mtu <= PACKET_HEADER_SIZE:
            raise EmulatorError(f"mtu {self.mtu} must exceed the {PACKET_HEADER_SIZE}-byte packet header")
        if self.loss_scale < 0:
            raise EmulatorError("loss_scale must be non-negative")
        if self.detail_max_q < 1:
            raise EmulatorError("detail_max_q must be >= 1")
        rates = sorted(table)
        for lo, hi in zip(rates, rates[1:]):
            if not table[lo] > table[hi]:
                raise EmulatorError(f"q must strictly grow as data rate falls: q({lo})={table[lo]}, "
                                    f"q({hi})={table[hi]}")
        for r, q in table.items():
            if not 1 <= q <= 65535:
                raise EmulatorError(f"q({r})={q} outside [1, 65535]")

    @classmethod
    def for_rates(cls, rates: Sequence[float], q: Sequence[int] | None = None, **kw) -> "RateConfig":
        table = dict(zip(map(float, rates), q)) if q is not None else _default_q_table(rates)
        return cls(q_table=table, **kw)

    def q_for(self, rate: float) -> int:
        try:
            return self.q_table[float(rate)]
        except (KeyError, TypeError, ValueError):
            raise EmulatorError(f"unknown data-rate class {rate!r}; configured: {sorted(self.q_table)}") from None

    @property
    def finest_q(self) -> int:
        return min(self.q_table.values())

    @property
    def finest_rate(self) -> float:
        return max(self.q_table)

    def loss_model(self, loss_class: float) -> LossModel:
        """Per-packet Bernoulli model for a loss class given in percent."""
        p = float(loss_class) / 100.0 * self.loss_scale
        if not 0.0 <= p <= 1.0:
            raise EmulatorError(f"loss class {loss_class}% maps to drop probability {p} outside [0, 1]")
        return LossModel("bernoulli", p)

    def to_dict(self) -> dict:
        return {
            "q_table": {format_class(k): v for k, v in sorted(self.q_table.items())},
            "block": self.block,
            "mtu": self.mtu,
            "loss_scale": self.loss_scale,
            "detail_max_q": self.detail_max_q,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RateConfig":
        return cls(q_table={float(k): int(v) for k, v in d["q_table"].items()},
                   block=int(d["block"]),
                   mtu=int(d["mtu"]), loss_scale=float(d["loss_scale"]),
                   detail_max_q=int(d.get("detail_max_q", cls.detail_max_q)))

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class BlockIndex:
    """Side information describing the block layout of an encoded stream."""

    width: int
    height: int
    channels: int
    block: int
    q: int
    offsets: np.ndarray
    lengths: np.ndarray

    @property
    def block_rows(self) -> int:
        return -(-self.height // self.block)

    @property
    def block_cols(self) -> int:
        return -(-self.width // self.block)

    @property
    def block_count(self) -> int:
        return self.channels * self.block_rows * self.block_cols

    @property
    def stream_length(self) -> int:
        return HEADER.size + int(self.lengths.sum())

    def validate(self) -> None:
        n = self.block_count
        if len(self.offsets) != n or len(self.lengths) != n:
            raise EmulatorError(f"corrupt block index: {len(self.offsets)} offsets for {n} blocks")
        if n and (self.offsets[0] != HEADER.size or (self.lengths < 2).any() or (self.lengths % 2).any()):
            raise EmulatorError("corrupt block index: bad first offset or record length")
        if n > 1 and not np.array_equal(self.offsets[1:], self.offsets[:-1] + self.lengths[:-1]):
            raise EmulatorError("corrupt block index: records are not contiguous")
        if self.q < 1:
            raise EmulatorError("corrupt block index: q < 1")


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 0..255 with floor(p * 255 + 0.5)."""
    f = np.asarray(frame, dtype=np.float64)
    if not np.isfinite(f).all():
        raise EmulatorError("frame contains non-finite values")
    return np.floor(np.clip(f, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _as_hwc(frame: np.ndarray) -> np.ndarray:
    a = np.asarray(frame)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise EmulatorError(f"frame must be HxW or HxWxC, got shape {a.shape}")
    return a


def _encode_block(pixels: np.ndarray, q: int, detail: bool = True) -> bytes:
    first = int(pixels[0])
    if (pixels == first).all():
        return bytes((first, 0))
    if not detail:
        level = int(np.floor(pixels.mean() / q + 0.5))
        return bytes((min(255, level * q), 0))
    levels = (pixels.astype(np.int64) + q // 2) // q
    base = int(levels.min())
    if base > 255 or int(levels.max()) - base > 255:
        raise EmulatorError(f"quantizer step {q} too fine for one-byte levels")
    levels = (levels - base).tolist()
    runs: list[int] = []
    prev, count = levels[0], 0
    for lv in levels:
        if lv == prev and count < 255:
            count += 1
        else:
            runs.extend((prev, count))
            prev, count = lv, 1
    runs.extend((prev, count))
    if len(runs) // 2 > 255:
        raise EmulatorError("block too large for one-byte run count")
    return bytes((base, len(runs) // 2, *runs))


def _blocks(img: np.ndarray, block: int):
    """Yield (channel, row, col, flat pixels) in stream order for an edge-padded HxWxC uint8 image."""
    h, w, c = img.shape
    ph, pw = -(-h // block) * block, -(-w // block) * block
    padded = np.pad(img, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    for ch in range(c):
        plane = padded[:, :, ch]
        for by in range(0, ph, block):
            for bx in range(0, pw, block):
                yield ch, by, bx, plane[by:by + block, bx:bx + block].reshape(-1)


def throttle_encode(frame: np.ndarray, rate: float, cfg: RateConfig) -> tuple[bytes, BlockIndex]:
    """Encode a [0, 1] frame at the quantizer step of ``rate``."""
    q = cfg.q_for(rate)
    img = to_uint8(_as_hwc(frame))
    h, w, c = img.shape
    if h > 65535 or w > 65535 or c > 255:
        raise EmulatorError(f"frame {img.shape} too large for the stream header")
    block = cfg.block
    detail = q <= cfg.detail_max_q
    records = [_encode_block(px, q, detail) for _, _, _, px in _blocks(img, block)]
    lengths = np.fromiter((len(r) for r in records), dtype=np.int64, count=len(records))
    offsets = HEADER.size + np.concatenate(([0], np.cumsum(lengths)[:-1])).astype(np.int64)
    header = HEADER.pack(MAGIC, VERSION, w, h, c, block, q, len(records))
    index = BlockIndex(w, h, c, block, q, offsets, lengths)
    return header + b"".join(records), index


def parse_header(stream: bytes) -> dict:
    if len(stream) < HEADER.size:
        raise EmulatorError("stream shorter than header")
    magic, version, w, h, c, block, q, count = HEADER.unpack_from(stream)
    if magic != MAGIC or version != VERSION:
        raise EmulatorError(f"bad stream magic/version {magic!r}/{version}")
    return {"width": w, "height": h, "channels": c, "block": block, "q": q, "block_count": count}


def index_stream(stream: bytes) -> BlockIndex:
    """Rebuild the block index by walking a complete stream."""
    hdr = parse_header(stream)
    offsets, lengths = [], []
    pos = HEADER.size
    for _ in range(hdr["block_count"]):
        if pos + 2 > len(stream):
            raise EmulatorError("truncated stream")
        n = 2 + 2 * stream[pos + 1]
        offsets.append(pos)
        lengths.append(n)
        pos += n
    if pos > len(stream):
        raise EmulatorError("truncated stream")
    if pos < len(stream):
        raise EmulatorError(f"{len(stream) - pos} trailing bytes after the last block")
    index = BlockIndex(hdr["width"], hdr["height"], hdr["channels"], hdr["block"], hdr["q"],
                       np.array(offsets, dtype=np.int64), np.array(lengths, dtype=np.int64))
    index.validate()
    return index


def _decode_block(record: bytes | memoryview, q: int, npx: int) -> np.ndarray:
    base, nruns = record[0], record[1]
    if nruns == 0:
        return np.full(npx, base, dtype=np.int64)
    pairs = np.frombuffer(bytes(record[2:2 + 2 * nruns]), dtype=np.uint8).reshape(-1, 2)
    levels = np.repeat(pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64))
    if levels.size != npx:
        raise EmulatorError(f"block record decodes to {levels.size} pixels, expected {npx}")
    return np.minimum(255, (base + levels) * q)


# ---------------------------------------------------------------------------
# packets and loss


@dataclass(frozen=True)
class Packet:
    seq: int
    payload: bytes
    frame_id: int = 0
    offset: int = 0
    block_range: tuple[int, int] = (0, 0)


def packetize(encoded: bytes, mtu: int, frame_id: int = 0, index: BlockIndex | None = None) -> list[Packet]:
    """Split ``encoded`` into consecutive payloads of at most ``mtu - 12`` bytes.

    Empty input produces a single packet with an empty payload. When an index
    is supplied each packet records the half-open range of blocks whose
    records overlap its bytes.
    """
    if mtu <= PACKET_HEADER_SIZE:
        raise EmulatorError(f"mtu {mtu} must exceed the {PACKET_HEADER_SIZE}-byte packet header")
    size = mtu - PACKET_HEADER_SIZE
    if not encoded:
        return [Packet(0, b"", frame_id, 0, (0, 0))]
    ends = None
    if index is not None:
        ends = index.offsets + index.lengths
    packets = []
    for seq, start in enumerate(range(0, len(encoded), size)):
        stop = min(start + size, len(encoded))
        rng = (0, 0)
        if ends is not None:
            first = int(np.searchsorted(ends, start, side="right"))
            last = int(np.searchsorted(index.offsets, stop, side="left"))
            rng = (first, max(first, last))
        packets.append(Packet(seq, bytes(encoded[start:stop]), frame_id, start, rng))
    return packets


def reassemble(packets: Sequence[Packet]) -> bytes:
    return b"".join(p.payload for p in sorted(packets, key=lambda p: p.seq))


def drop_mask(n: int, model: LossModel, rng: np.random.Generator) -> np.ndarray:
    """Boolean array, True where the packet is lost."""
    if n == 0:
        return np.zeros(0, dtype=bool)
    if model.kind == "bernoulli":
        return rng.random(n) < model.p
    u = rng.random(2 * n)
    denom = model.p_good_to_bad + model.p_bad_to_good
    pi_bad = model.p_good_to_bad / denom if denom > 0 else 0.0
    bad = u[0] < pi_bad
    lost = np.empty(n, dtype=bool)
    for i in range(n):
        lost[i] = bad and u[2 * i + 1] < model.loss_in_bad
        if i + 1 < n:
            bad = (u[2 * i + 2] >= model.p_bad_to_good) if bad else (u[2 * i + 2] < model.p_good_to_bad)
    return lost


def apply_loss(packets: Sequence[Packet], model: LossModel, rng_seed: int) -> list[Packet]:
    """Drop packets with a dedicated ``default_rng(rng_seed)`` stream; survivors keep order."""
    lost = drop_mask(len(packets), model, np.random.default_rng(rng_seed))
    return [p for p, gone in zip(packets, lost) if not gone]


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DegradedFrame:
    pixels: np.ndarray  # HxWxC float in [0, 1]
    state: NetworkState | None = None
    frame_id: int = 0
    seed: int = 0
    lost_blocks: int = 0
    total_blocks: int = 0
    partial_blocks: int = 0
    packets_sent: int = 0
    packets_lost: int = 0

    @property
    def lost_fraction(self) -> float:
        return self.lost_blocks / self.total_blocks if self.total_blocks else 0.0


def decode_conceal(survivors: Sequence[Packet], index: BlockIndex, reference: np.ndarray | None = None) -> DegradedFrame:
    """Decode every fully received block; conceal the rest.

    A block whose two leading bytes (base level and run count) arrived but
    whose runs were cut by a lost packet is shown flat at its base level.
    Blocks whose leading bytes were lost are concealed: they copy the
    co-located pixels of ``reference`` (a previous decoded frame in [0, 1])
    or are filled with mid-gray when there is none. Concealment therefore
    hits a block with the same probability whatever its record length.
    """
    index.validate()
    total = index.stream_length
    buf = bytearray(total)
    have = np.zeros(total, dtype=bool)
    for p in survivors:
        end = p.offset + len(p.payload)
        if end > total:
            raise EmulatorError(f"packet {p.seq} extends past the {total}-byte stream")
        buf[p.offset:end] = p.payload
        have[p.offset:end] = True
    b, h, w, c = index.block, index.height, index.width, index.channels
    ph, pw = index.block_rows * b, index.block_cols * b
    if reference is not None:
        ref = to_uint8(_as_hwc(reference))
        if ref.shape != (h, w, c):
            raise EmulatorError(f"reference shape {ref.shape} != frame shape {(h, w, c)}")
        ref = np.pad(ref, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    else:
        ref = None
    out = np.empty((ph, pw, c), dtype=np.int64)
    gray = int(to_uint8(np.array(GRAY)))
    lost = partial = 0
    view = memoryview(bytes(buf))
    k = 0
    for ch in range(c):
        for by in range(0, ph, b):
            for bx in range(0, pw, b):
                off, ln = int(index.offsets[k]), int(index.lengths[k])
                k += 1
                if have[off:off + ln].all():
                    out[by:by + b, bx:bx + b, ch] = _decode_block(view[off:off + ln], index.q, b * b).reshape(b, b)
                elif have[off] and have[off + 1]:
                    partial += 1
                    out[by:by + b, bx:bx + b, ch] = min(255, view[off] * index.q)
                else:
                    lost += 1
                    out[by:by + b, bx:bx + b, ch] = gray if ref is None else ref[by:by + b, bx:bx + b, ch]
    pixels = out[:h, :w, :].astype(np.float64) / 255.0
    return DegradedFrame(pixels, lost_blocks=lost, total_blocks=index.block_count, partial_blocks=partial)


def decode(stream: bytes) -> np.ndarray:
    """Decode a complete stream (no losses) to an HxWxC float frame."""
    index = index_stream(stream)
    return decode_conceal([Packet(0, stream, 0, 0)], index).pixels


# ---------------------------------------------------------------------------
# composition


def derive_seed(master_seed: int, frame_id: int, condition_id: int | str) -> int:
    """Order-independent per-call seed from (master seed, frame id, condition id)."""
    text = f"{int(master_seed)}|{int(frame_id)}|{condition_id}".encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def degrade(frame: np.ndarray, state: NetworkState, seed: int, cfg: RateConfig | None = None,
            frame_id: int = 0, reference: np.ndarray | None = None, loss: LossModel | None = None) -> DegradedFrame:
    """Encode at the state's rate, packetize, drop per its loss class, decode with concealment."""
    cfg = cfg or RateConfig()
    stream, index = throttle_encode(frame, state.data_rate, cfg)
    packets = packetize(stream, cfg.mtu, frame_id, index)
    model = loss if loss is not None else cfg.loss_model(state.packet_loss)
    survivors = apply_loss(packets, model, seed)
    out = decode_conceal(survivors, index, reference)
    out.state = state
    out.frame_id = frame_id
    out.seed = seed
    out.packets_sent = len(packets)
    out.packets_lost = len(packets) - len(survivors)
    if np.asarray(frame).ndim == 2:
        out.pixels = out.pixels[:, :, 0]
    return out

