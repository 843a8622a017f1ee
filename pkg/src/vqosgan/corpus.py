"""Labelled corpus of degraded frames built from synthetic videos.

Layout under the corpus root::

    original/f00000.pgm
    degraded/f00000_r1600_l0.25.pgm
    manifest.jsonl      # header line, then one record per degraded frame

The manifest is written last through an atomic rename, so a directory without
it is an incomplete build.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .emulator import DEFAULT_LOSSES, DEFAULT_RATES, NetworkState, RateConfig, degrade, derive_seed, format_class
from .models import ClassSets
from .errors import DataError
from .pgm import read_pgm, write_pgm
from .synth import MOTIFS, gen_video

MANIFEST = "manifest.jsonl"
GENERATOR_VERSION = "synth-1"
SPLITS = ("train", "test")

__all__ = [
    "CorpusConfig",
    "CorpusError",
    "CorpusManifest",
    "Batch",
    "build_corpus",
    "gen_video",
    "load_batch",
    "load_split",
    "verify_corpus",
]


class CorpusError(DataError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    n_frames: int = 200
    frames_per_video: int = 10
    size: tuple[int, int] = (64, 64)
    rates: tuple[float, ...] = DEFAULT_RATES
    losses: tuple[float, ...] = DEFAULT_LOSSES
    seed: int = 0
    motifs: tuple[str, ...] = MOTIFS
    train_fraction: float = 0.8
    emulator: RateConfig = field(default_factory=RateConfig)

    def __post_init__(self):
        if self.n_frames < 1 or self.frames_per_video < 1:
            raise CorpusError("n_frames and frames_per_video must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise CorpusError("train_fraction must lie in (0, 1)")
        for m in self.motifs:
            if m not in MOTIFS:
                raise CorpusError(f"unknown motif {m!r}; choose from {MOTIFS}")
        for r in self.rates:
            self.emulator.q_for(r)
        for loss in self.losses:
            self.emulator.loss_model(loss)

    @property
    def classes(self) -> ClassSets:
        return ClassSets(tuple(self.rates), tuple(self.losses))

    def n_test(self) -> int:
        return int(round(self.n_frames * (1.0 - self.train_fraction)))


def _condition_id(state: NetworkState) -> str:
    return f"r{format_class(state.data_rate)}_l{format_class(state.packet_loss)}"


def source_frames(cfg: CorpusConfig) -> list[np.ndarray]:
    """All source frames in frame-id order (videos of ``frames_per_video`` each)."""
    frames: list[np.ndarray] = []
    video = 0
    while len(frames) < cfg.n_frames:
        n = min(cfg.frames_per_video, cfg.n_frames - len(frames))
        motif = cfg.motifs[video % len(cfg.motifs)]
        frames.extend(gen_video(derive_seed(cfg.seed, video, "video"), n, cfg.size, motif))
        video += 1
    return frames


def split_ids(cfg: CorpusConfig) -> dict[int, str]:
    rng = np.random.default_rng(derive_seed(cfg.seed, 0, "split"))
    test = set(rng.permutation(cfg.n_frames)[:cfg.n_test()].tolist())
    return {i: ("test" if i in test else "train") for i in range(cfg.n_frames)}


def _degrade_job(args):
    frame, state, seed, emu, frame_id = args
    return degrade(frame, state, seed, emu, frame_id=frame_id)


def _header(cfg: CorpusConfig) -> dict:
    return {
        "kind": "header",
        "format": 1,
        "class_sets": cfg.classes.to_dict(),
        "frame_size": list(cfg.size),
        "channels": 1,
        "emulator": cfg.emulator.to_dict(),
        "emulator_hash": cfg.emulator.digest(),
        "generator_version": GENERATOR_VERSION,
        "seed": cfg.seed,
        "n_frames": cfg.n_frames,
        "frames_per_video": cfg.frames_per_video,
        "motifs": list(cfg.motifs),
        "train_fraction": cfg.train_fraction,
    }


def build_corpus(cfg: CorpusConfig, out_dir: str | os.PathLike, workers: int = 1) -> "CorpusManifest":
    """Generate, degrade under every condition, persist, and write the manifest last."""
    root = Path(out_dir)
    (root / "original").mkdir(parents=True, exist_ok=True)
    (root / "degraded").mkdir(parents=True, exist_ok=True)
    manifest_path = root / MANIFEST
    if manifest_path.exists():
        manifest_path.unlink()

    frames = source_frames(cfg)
    splits = split_ids(cfg)
    conditions = cfg.classes.conditions
    jobs = []
    for fid, frame in enumerate(frames):
        write_pgm(root / "original" / f"f{fid:05d}.pgm", frame)
        for state in conditions:
            jobs.append((frame, state, derive_seed(cfg.seed, fid, _condition_id(state)), cfg.emulator, fid))

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_degrade_job, jobs, chunksize=16))
    else:
        results = [_degrade_job(j) for j in jobs]

    records = []
    for (_, state, seed, _, fid), out in zip(jobs, results):
        rel = f"degraded/f{fid:05d}_{_condition_id(state)}.pgm"
        write_pgm(root / rel, out.pixels)
        records.append({
            "degraded": rel,
            "original": f"original/f{fid:05d}.pgm",
            "rate": state.data_rate,
            "loss": state.packet_loss,
            "split": splits[fid],
            "seed": seed,
            "frame_id": fid,
            "lost_blocks": out.lost_blocks,
            "total_blocks": out.total_blocks,
        })

    lines = [json.dumps(_header(cfg), sort_keys=True)] + [json.dumps(r, sort_keys=True) for r in records]
    tmp = root / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path)
    return CorpusManifest.load(root)


@dataclass
class CorpusManifest:
    root: Path
    header: dict
    records: list[dict]

    @classmethod
    def load(cls, root: str | os.PathLike) -> "CorpusManifest":
        root = Path(root)
        path = root / MANIFEST
        if not path.exists():
            raise CorpusError(f"{root}: no {MANIFEST}; corpus missing or incomplete")
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        try:
            rows = [json.loads(ln) for ln in lines]
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}: malformed manifest ({exc})") from None
        if not rows or rows[0].get("kind") != "header":
            raise CorpusError(f"{path}: missing header line")
        return cls(root, rows[0], rows[1:])

    @property
    def classes(self) -> ClassSets:
        return ClassSets.from_dict(self.header["class_sets"])

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        h, w = self.header["frame_size"]
        return (int(self.header.get("channels", 1)), int(h), int(w))

    @property
    def emulator(self) -> RateConfig:
        return RateConfig.from_dict(self.header["emulator"])

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.header, sort_keys=True).encode()).hexdigest()[:16]

    def split(self, name: str) -> list[dict]:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r["split"] == name]


def verify_corpus(manifest: CorpusManifest) -> list[str]:
    """One pass over manifest and disk; returns a list of problems (empty when valid)."""
    problems = []
    classes = manifest.classes
    seen_paths = set()
    frame_split: dict[int, str] = {}
    for r in manifest.records:
        for key in ("degraded", "original"):
            p = manifest.root / r[key]
            if not p.is_file():
                problems.append(f"missing file {p}")
        if r["degraded"] in seen_paths:
            problems.append(f"duplicate record {r['degraded']}")
        seen_paths.add(r["degraded"])
        try:
            classes.indices(NetworkState(r["rate"], r["loss"]))
        except ValueError as exc:
            problems.append(f"{r['degraded']}: {exc}")
        if r["split"] not in SPLITS:
            problems.append(f"{r['degraded']}: bad split {r['split']!r}")
        prev = frame_split.setdefault(r["frame_id"], r["split"])
        if prev != r["split"]:
            problems.append(f"frame {r['frame_id']} appears in both splits")
    for split in SPLITS:
        present = {(r["rate"], r["loss"]) for r in manifest.records if r["split"] == split}
        for state in classes.conditions:
            if state.as_tuple() not in present:
                problems.append(f"condition {state} absent from {split} split")
    return problems


@dataclass
class Batch:
    received: np.ndarray  # (N, C, H, W)
    original: np.ndarray
    rate_idx: np.ndarray
    loss_idx: np.ndarray
    records: list[dict]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SplitData:
    """A split held in memory as stacked arrays."""

    received: np.ndarray
    original: np.ndarray
    rate_idx: np.ndarray
    loss_idx: np.ndarray
    records: list[dict]

    def __len__(self) -> int:
        return len(self.records)

    def batches(self, batch_size: int, epoch_seed: int | None = None) -> Iterator[Batch]:
        if batch_size < 1:
            raise CorpusError("batch_size must be >= 1")
        n = len(self.records)
        order = np.arange(n) if epoch_seed is None else np.random.default_rng(epoch_seed).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield Batch(self.received[idx], self.original[idx], self.rate_idx[idx], self.loss_idx[idx],
                        [self.records[i] for i in idx])


def _stack(paths: Sequence[Path], cache: dict) -> np.ndarray:
    out = []
    for p in paths:
        if p not in cache:
            cache[p] = read_pgm(p)
        out.append(cache[p])
    return np.stack(out)[:, None, :, :]


def load_split(manifest: CorpusManifest, split: str) -> SplitData:
    records = manifest.split(split)
    if not records:
        raise CorpusError(f"split {split!r} is empty")
    classes = manifest.classes
    cache: dict = {}
    recv = _stack([manifest.root / r["degraded"] for r in records], cache)
    org = _stack([manifest.root / r["original"] for r in records], cache)
    expected = manifest.frame_shape
    if recv.shape[1:] != expected:
        raise CorpusError(f"images are {recv.shape[1:]} but manifest declares {expected}")
    ri = np.array([classes.rate_index(r["rate"]) for r in records], dtype=np.int64)
    li = np.array([classes.loss_index(r["loss"]) for r in records], dtype=np.int64)
    return SplitData(recv, org, ri, li, records)


def load_batch(manifest: CorpusManifest, split: str, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """Shuffled batches of (received, original, labels); every record once per epoch."""
    return load_split(manifest, split).batches(batch_size, epoch_seed)
