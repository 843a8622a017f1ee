"""Adversarial training, prediction and reconstruction for the conditional GAN.

One optimisation step per batch updates the discriminator once, then the
generator once:

* discriminator: mean of a real term (validity of original frames toward 1,
  plus rate/loss cross-entropy on the received frames) and a fake term
  (validity of detached generator output toward 0);
* generator: ``lambda_adv * BCE(valid(G), 1) + lambda_rec * L1(G, original)
  + lambda_cls * (CE_rate(G) + CE_loss(G))``.

Both learning rates follow a per-epoch cosine decay to ``lr_final_fraction``
of their starting value.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import Adam, Tensor, no_grad, ops
from .checkpoint import CheckpointError, load_checkpoint, load_state, save_checkpoint, state_dict
from .corpus import Batch, CorpusManifest, SplitData, load_split
from .emulator import NetworkState, derive_seed
from .errors import DataError, NumericError
from .models import ClassSets, Discriminator, Generator

log = logging.getLogger(__name__)

MODEL_KIND = "vqosgan"
PSNR_CAP = 100.0
METRIC_FIELDS = ("epoch", "disc_loss", "gen_loss", "gen_adv", "gen_rec", "gen_cls",
                 "rate_acc", "loss_acc", "joint_acc", "psnr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr_g: float = 1e-3
    lr_d: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_adv: float = 0.002
    lambda_rec: float = 1.0
    lambda_cls: float = 0.05
    latent_dim: int = 256
    g_channels: tuple[int, ...] = (16, 32, 64)
    d_channels: tuple[int, ...] = (16, 32, 64, 64)
    residual: bool = True
    skips: bool = True
    d_cls_on_fake: bool = False
    lr_final_fraction: float = 0.05  # cosine decay of both learning rates to this fraction; 1.0 keeps them constant
    seed: int = 0
    checkpoint_interval: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.latent_dim < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and latent_dim >= 1 are required")
        if min(self.lambda_adv, self.lambda_rec, self.lambda_cls) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_rec <= 0:
            raise ValueError("lambda_rec must be positive")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ValueError("lr_final_fraction must lie in (0, 1]")
        object.__setattr__(self, "g_channels", tuple(self.g_channels))
        object.__setattr__(self, "d_channels", tuple(self.d_channels))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown training options: {unknown}")
        return cls(**d)


def frame_psnr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-frame PSNR over the leading axis, capped at ``PSNR_CAP`` for identical frames."""
    mse = ((np.asarray(a) - np.asarray(b)) ** 2).reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(1.0 / mse)
    return np.minimum(out, PSNR_CAP)


class GAN:
    """Generator/discriminator pair plus the class sets they were built for."""

    def __init__(self, frame_shape: tuple[int, int, int], classes: ClassSets, cfg: TrainConfig):
        self.frame_shape = tuple(frame_shape)
        self.classes = classes
        self.cfg = cfg
        self.G = Generator(self.frame_shape, classes, cfg.latent_dim, cfg.g_channels,
                           seed=derive_seed(cfg.seed, 0, "generator"), residual=cfg.residual, skips=cfg.skips)
        self.D = Discriminator(self.frame_shape, classes, cfg.d_channels, seed=derive_seed(cfg.seed, 0, "discriminator"))

    def tensors(self) -> dict[str, np.ndarray]:
        return state_dict(("generator.", self.G), ("discriminator.", self.D))

    def metadata(self, corpus_hash: str | None = None, epoch: int | None = None) -> dict:
        return {
            "model_kind": MODEL_KIND,
            "architecture": {"generator": self.G.architecture(), "discriminator": self.D.architecture()},
            "class_sets": self.classes.to_dict(),
            "frame_shape": list(self.frame_shape),
            "corpus_hash": corpus_hash,
            "seed": self.cfg.seed,
            "epoch": epoch,
            "train_config": self.cfg.to_dict(),
        }

    def save(self, path: str | os.PathLike, corpus_hash: str | None = None, epoch: int | None = None) -> None:
        save_checkpoint(path, self.tensors(), self.metadata(corpus_hash, epoch))

    @classmethod
    def load(cls, path: str | os.PathLike) -> tuple["GAN", dict]:
        tensors, meta = load_checkpoint(path)
        if meta.get("model_kind") != MODEL_KIND:
            raise CheckpointError(f"{path}: model kind {meta.get('model_kind')!r}, expected {MODEL_KIND!r}")
        cfg = TrainConfig.from_dict(_tuples(meta["train_config"]))
        gan = cls(tuple(meta["frame_shape"]), ClassSets.from_dict(meta["class_sets"]), cfg)
        load_state(gan.G, tensors, "generator.")
        load_state(gan.D, tensors, "discriminator.")
        return gan, meta

    def check_frames(self, frames: np.ndarray) -> np.ndarray:
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != self.frame_shape:
            raise DataError(f"frames of shape {tuple(x.shape[1:])} do not match model input {self.frame_shape}")
        return x

    def check_classes(self, classes: ClassSets) -> None:
        if classes != self.classes:
            raise DataError(f"class sets differ: model {self.classes.describe()} vs corpus {classes.describe()}")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass
class StepResult:
    disc_loss: float
    gen_loss: float
    gen_adv: float
    gen_rec: float
    gen_cls: float
    rate_correct: int
    loss_correct: int
    joint_correct: int
    psnr_sum: float
    n: int


def _finite(name: str, value: float, opt: Adam, batch_id: int | None) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {name} ({value}) at batch {batch_id}, lr {opt.state.lr}")
    return value


def discriminator_loss(gan: GAN, batch: Batch, fake: Tensor, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Mean of the real term and the fake term; also returns rate/loss logits on the received frames."""
    D, n = gan.D, len(batch)
    both = Tensor(np.concatenate([batch.original, batch.received]))
    r_logit, l_logit, valid = D(both)
    r_recv, l_recv = ops.rows(r_logit, n, 2 * n), ops.rows(l_logit, n, 2 * n)
    real_term = (ops.bce(ops.rows(valid, 0, n), np.ones((n, 1)))
                 + ops.cross_entropy(r_recv, batch.rate_idx)
                 + ops.cross_entropy(l_recv, batch.loss_idx))
    fr, fl, fv = D(fake)
    fake_term = ops.bce(fv, np.zeros((n, 1)))
    if cfg.d_cls_on_fake:
        fake_term = fake_term + ops.cross_entropy(fr, batch.rate_idx) + ops.cross_entropy(fl, batch.loss_idx)
    return (real_term + fake_term) * 0.5, r_recv, l_recv


def generator_loss(gan: GAN, batch: Batch, out: Tensor, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Total generator loss and its three weighted parts (adversarial, reconstruction, classification)."""
    gr, gl, gv = gan.D(out)
    adv = ops.bce(gv, np.ones((len(batch), 1))) * cfg.lambda_adv
    rec = ops.l1(out, Tensor(batch.original)) * cfg.lambda_rec
    cls = (ops.cross_entropy(gr, batch.rate_idx) + ops.cross_entropy(gl, batch.loss_idx)) * cfg.lambda_cls
    return adv + rec + cls, adv, rec, cls


def train_step(batch: Batch, gan: GAN, opt_g: Adam, opt_d: Adam, cfg: TrainConfig,
               batch_id: int | None = None) -> StepResult:
    """One discriminator update followed by one generator update.

    Any non-finite value aborts with the batch id and both learning rates in the message.
    """
    try:
        return _train_step(batch, gan, opt_g, opt_d, cfg, batch_id)
    except NumericError as e:
        if "at batch" in str(e):
            raise
        raise NumericError(f"{e} at batch {batch_id}, lr_g {opt_g.state.lr}, lr_d {opt_d.state.lr}") from e


def _train_step(batch: Batch, gan: GAN, opt_g: Adam, opt_d: Adam, cfg: TrainConfig,
                batch_id: int | None) -> StepResult:
    G, D, classes = gan.G, gan.D, gan.classes
    planes = Tensor(classes.label_planes(batch.rate_idx, batch.loss_idx, *gan.frame_shape[1:]))

    # the generator output is built once; the discriminator step sees it detached
    out = G(Tensor(batch.received), planes=planes)
    d_loss, r_recv, l_recv = discriminator_loss(gan, batch, out.detach(), cfg)
    _finite("discriminator loss", d_loss.item(), opt_d, batch_id)
    opt_d.zero_grad()
    d_loss.backward()
    opt_d.step()

    rate_ok = r_recv.data.argmax(axis=1) == batch.rate_idx
    loss_ok = l_recv.data.argmax(axis=1) == batch.loss_idx

    # generator, scored by the freshly updated discriminator
    g_loss, w_adv, w_rec, w_cls = generator_loss(gan, batch, out, cfg)
    _finite("generator loss", g_loss.item(), opt_g, batch_id)
    opt_g.zero_grad()
    D.zero_grad()
    g_loss.backward()
    opt_g.step()
    D.zero_grad()

    return StepResult(
        disc_loss=d_loss.item(), gen_loss=g_loss.item(),
        gen_adv=w_adv.item(), gen_rec=w_rec.item(), gen_cls=w_cls.item(),
        rate_correct=int(rate_ok.sum()), loss_correct=int(loss_ok.sum()), joint_correct=int((rate_ok & loss_ok).sum()),
        psnr_sum=float(frame_psnr(out.data, batch.original).sum()), n=len(batch),
    )


def lr_scale(epoch: int, epochs: int, final_fraction: float) -> float:
    """Cosine factor for 1-based ``epoch``: 1 at the first epoch, ``final_fraction`` at the last."""
    if epochs <= 1 or final_fraction == 1.0:
        return 1.0
    t = (epoch - 1) / (epochs - 1)
    return final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + math.cos(math.pi * t))


def make_optimizers(gan: GAN, cfg: TrainConfig) -> tuple[Adam, Adam]:
    return (Adam(gan.G.parameters(), lr=cfg.lr_g, beta1=cfg.beta1, beta2=cfg.beta2),
            Adam(gan.D.parameters(), lr=cfg.lr_d, beta1=cfg.beta1, beta2=cfg.beta2))


def _epoch_row(epoch: int, steps: Sequence[StepResult]) -> dict:
    n = sum(s.n for s in steps)

    def wmean(attr):
        return sum(getattr(s, attr) * s.n for s in steps) / n

    return {
        "epoch": epoch,
        "disc_loss": wmean("disc_loss"), "gen_loss": wmean("gen_loss"),
        "gen_adv": wmean("gen_adv"), "gen_rec": wmean("gen_rec"), "gen_cls": wmean("gen_cls"),
        "rate_acc": sum(s.rate_correct for s in steps) / n,
        "loss_acc": sum(s.loss_correct for s in steps) / n,
        "joint_acc": sum(s.joint_correct for s in steps) / n,
        "psnr": sum(s.psnr_sum for s in steps) / n,
    }


class MetricsLog:
    """Per-epoch CSV written row by row and flushed, so an aborted run keeps its history."""

    def __init__(self, path: str | os.PathLike, fields: Sequence[str] = METRIC_FIELDS):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=list(fields), lineterminator="\n")
        self._writer.writeheader()
        self._fh.flush()
        self.rows: list[dict] = []

    def write(self, row: dict) -> None:
        self.rows.append(row)
        self._writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            try:
                self._fh.flush()
            finally:
                self._fh.close()


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_csv: Path
    history: list[dict]
    snapshots: list[Path]


def run_training(model_name: str, epochs: int, interval: int, out_dir: Path, fields: Sequence[str],
                 save: Callable[[Path, int], None], epoch_fn: Callable[[int], dict]) -> TrainResult:
    """Shared epoch loop: initial snapshot, per-epoch CSV rows, snapshots every interval and at the end."""
    out_dir = Path(out_dir)
    snap_dir = out_dir / "checkpoints"
    snap_dir.mkdir(parents=True, exist_ok=True)
    latest = out_dir / f"{model_name}.ckpt"
    snapshots = []

    def snapshot(epoch):
        p = snap_dir / f"{model_name}_e{epoch:04d}.ckpt"
        save(p, epoch)
        snapshots.append(p)

    snapshot(0)
    metrics = MetricsLog(out_dir / f"{model_name}_metrics.csv", fields)
    try:
        for epoch in range(1, epochs + 1):
            row = epoch_fn(epoch)
            metrics.write(row)
            log.info("%s epoch %d/%d %s", model_name, epoch, epochs,
                     " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
            if epoch % interval == 0 or epoch == epochs:
                snapshot(epoch)
    finally:
        metrics.close()
    save(latest, epochs)
    return TrainResult(latest, metrics.path, metrics.rows, snapshots)


def train(cfg: TrainConfig, manifest: CorpusManifest, out_dir: str | os.PathLike,
          data: SplitData | None = None) -> TrainResult:
    """Train on the manifest's train split, writing checkpoints and ``vqosgan_metrics.csv`` under ``out_dir``."""
    data = data if data is not None else load_split(manifest, "train")
    gan = GAN(manifest.frame_shape, manifest.classes, cfg)
    opt_g, opt_d = make_optimizers(gan, cfg)
    corpus_hash = manifest.config_hash()
    batch_counter = [0]

    def epoch_fn(epoch):
        scale = lr_scale(epoch, cfg.epochs, cfg.lr_final_fraction)
        opt_g.state.lr, opt_d.state.lr = cfg.lr_g * scale, cfg.lr_d * scale
        steps = []
        for batch in data.batches(cfg.batch_size, derive_seed(cfg.seed, epoch, "batches")):
            steps.append(train_step(batch, gan, opt_g, opt_d, cfg, batch_counter[0]))
            batch_counter[0] += 1
        return _epoch_row(epoch, steps)

    return run_training(MODEL_KIND, cfg.epochs, cfg.checkpoint_interval, Path(out_dir), METRIC_FIELDS,
                        lambda p, e: gan.save(p, corpus_hash, e), epoch_fn)


@dataclass(frozen=True)
class Prediction:
    state: NetworkState
    rate_idx: int
    loss_idx: int
    validity: float
    rate_probs: tuple[float, ...]
    loss_probs: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"data_rate": self.state.data_rate, "packet_loss": self.state.packet_loss,
                "validity": self.validity, "rate_probs": list(self.rate_probs), "loss_probs": list(self.loss_probs)}


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def discriminate(gan: GAN, frames: np.ndarray, chunk: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw discriminator outputs (rate logits, loss logits, validity) for a frame batch."""
    x = gan.check_frames(frames)
    outs = []
    with no_grad():
        for s in _chunks(len(x), chunk):
            r, l, v = gan.D(Tensor(x[s]))
            outs.append((r.data, l.data, v.data[:, 0]))
    return tuple(np.concatenate(parts) for parts in zip(*outs))


def predict(gan: GAN, frames: np.ndarray) -> list[Prediction]:
    """Network-state labels from received frames alone (argmax of each head)."""
    r, l, v = discriminate(gan, frames)
    pr, pl = ops.softmax_np(r, axis=1), ops.softmax_np(l, axis=1)
    out = []
    for i in range(len(v)):
        ri, li = int(pr[i].argmax()), int(pl[i].argmax())
        out.append(Prediction(gan.classes.state(ri, li), ri, li, float(v[i]),
                              tuple(float(p) for p in pr[i]), tuple(float(p) for p in pl[i])))
    return out


def reconstruct(gan: GAN, frames: np.ndarray, labels: Sequence[NetworkState] | NetworkState | None = None,
                chunk: int = 64) -> np.ndarray:
    """Restore received frames; labels default to the model's own predictions."""
    x = gan.check_frames(frames)
    if labels is None:
        idx = [(p.rate_idx, p.loss_idx) for p in predict(gan, x)]
    else:
        if isinstance(labels, NetworkState):
            labels = [labels] * len(x)
        if len(labels) != len(x):
            raise DataError(f"{len(labels)} labels for {len(x)} frames")
        idx = [gan.classes.indices(s) for s in labels]
    ri = np.array([i[0] for i in idx], dtype=np.int64)
    li = np.array([i[1] for i in idx], dtype=np.int64)
    return reconstruct_indices(gan, x, ri, li, chunk)


def wrong_labels(classes: ClassSets, rate_idx: np.ndarray, loss_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic wrong-label probe: shift both indices by one (mod class count)."""
    r = (np.asarray(rate_idx) + 1) % classes.n_rate
    lo = (np.asarray(loss_idx) + 1) % classes.n_loss
    return r, lo


def reconstruct_indices(gan: GAN, frames: np.ndarray, rate_idx, loss_idx, chunk: int = 64) -> np.ndarray:
    x = gan.check_frames(frames)
    ri, li = np.asarray(rate_idx), np.asarray(loss_idx)
    outs = []
    with no_grad():
        for s in _chunks(len(x), chunk):
            outs.append(gan.G(Tensor(x[s]), ri[s], li[s]).data)
    return np.concatenate(outs)
