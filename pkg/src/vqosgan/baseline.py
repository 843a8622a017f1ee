"""Paired-input CNN baseline: classifies network state from (original, received)."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Adam, Tensor, no_grad, ops
from .checkpoint import CheckpointError, load_checkpoint, load_state, save_checkpoint, state_dict
from .corpus import CorpusManifest, SplitData, load_split
from .emulator import NetworkState, derive_seed
from .errors import DataError, NumericError
from .gan import TrainResult, run_training
from .models import ClassSets, PairedCNN

MODEL_KIND = "baseline_cnn"
METRIC_FIELDS = ("epoch", "loss", "rate_acc", "loss_acc", "joint_acc")


@dataclass(frozen=True)
class BaselineConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    channels: tuple[int, ...] = (16, 32, 64, 64)
    seed: int = 0
    checkpoint_interval: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.checkpoint_interval < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, lr > 0 and checkpoint_interval >= 1 are required")
        object.__setattr__(self, "channels", tuple(self.channels))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown baseline options: {unknown}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class Baseline:
    def __init__(self, frame_shape: tuple[int, int, int], classes: ClassSets, cfg: BaselineConfig):
        self.frame_shape = tuple(frame_shape)
        self.classes = classes
        self.cfg = cfg
        self.net = PairedCNN(self.frame_shape, classes, cfg.channels, seed=derive_seed(cfg.seed, 0, "baseline"))

    def metadata(self, corpus_hash: str | None = None, epoch: int | None = None) -> dict:
        return {
            "model_kind": MODEL_KIND,
            "architecture": self.net.architecture(),
            "class_sets": self.classes.to_dict(),
            "frame_shape": list(self.frame_shape),
            "corpus_hash": corpus_hash,
            "seed": self.cfg.seed,
            "epoch": epoch,
            "train_config": self.cfg.to_dict(),
        }

    def save(self, path: str | os.PathLike, corpus_hash: str | None = None, epoch: int | None = None) -> None:
        save_checkpoint(path, state_dict(("baseline.", self.net)), self.metadata(corpus_hash, epoch))

    @classmethod
    def load(cls, path: str | os.PathLike) -> tuple["Baseline", dict]:
        tensors, meta = load_checkpoint(path)
        if meta.get("model_kind") != MODEL_KIND:
            raise CheckpointError(f"{path}: model kind {meta.get('model_kind')!r}, expected {MODEL_KIND!r}")
        model = cls(tuple(meta["frame_shape"]), ClassSets.from_dict(meta["class_sets"]),
                    BaselineConfig.from_dict(meta["train_config"]))
        load_state(model.net, tensors, "baseline.")
        return model, meta

    def check_classes(self, classes: ClassSets) -> None:
        if classes != self.classes:
            raise DataError(f"class sets differ: model {self.classes.describe()} vs corpus {classes.describe()}")

    def logits(self, original: np.ndarray, received: np.ndarray, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
        o, r = _frames(original, self.frame_shape), _frames(received, self.frame_shape)
        if o.shape != r.shape:
            raise DataError(f"original {o.shape} and received {r.shape} differ in shape")
        rl, ll = [], []
        with no_grad():
            for start in range(0, len(o), chunk):
                a, b = self.net(Tensor(o[start:start + chunk]), Tensor(r[start:start + chunk]))
                rl.append(a.data)
                ll.append(b.data)
        return np.concatenate(rl), np.concatenate(ll)


def _frames(x, shape) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    if a.shape[1:] != tuple(shape):
        raise DataError(f"frames of shape {tuple(a.shape[1:])} do not match model input {tuple(shape)}")
    return a


def baseline_train(cfg: BaselineConfig, manifest: CorpusManifest, out_dir: str | os.PathLike,
                   data: SplitData | None = None) -> TrainResult:
    """Cross-entropy on both heads; writes ``baseline_cnn.ckpt`` and ``baseline_cnn_metrics.csv``."""
    data = data if data is not None else load_split(manifest, "train")
    model = Baseline(manifest.frame_shape, manifest.classes, cfg)
    opt = Adam(model.net.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    corpus_hash = manifest.config_hash()
    counter = [0]

    def epoch_fn(epoch):
        total = rate_ok = loss_ok = joint_ok = n = 0
        for batch in data.batches(cfg.batch_size, derive_seed(cfg.seed, epoch, "baseline-batches")):
            r, l = model.net(Tensor(batch.original), Tensor(batch.received))
            loss = ops.cross_entropy(r, batch.rate_idx) + ops.cross_entropy(l, batch.loss_idx)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite baseline loss ({value}) at batch {counter[0]}, lr {cfg.lr}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            counter[0] += 1
            ro = r.data.argmax(axis=1) == batch.rate_idx
            lo = l.data.argmax(axis=1) == batch.loss_idx
            k = len(batch)
            total += value * k
            rate_ok += int(ro.sum())
            loss_ok += int(lo.sum())
            joint_ok += int((ro & lo).sum())
            n += k
        return {"epoch": epoch, "loss": total / n, "rate_acc": rate_ok / n, "loss_acc": loss_ok / n,
                "joint_acc": joint_ok / n}

    return run_training(MODEL_KIND, cfg.epochs, cfg.checkpoint_interval, Path(out_dir), METRIC_FIELDS,
                        lambda p, e: model.save(p, corpus_hash, e), epoch_fn)


def baseline_predict(model: Baseline, original: np.ndarray, received: np.ndarray) -> list[NetworkState]:
    """Argmax network state per (original, received) pair."""
    r, l = model.logits(original, received)
    return [model.classes.state(int(a), int(b)) for a, b in zip(r.argmax(axis=1), l.argmax(axis=1))]
