"""Confusion matrices, PSNR and the evaluation report for trained models."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import Baseline
from .corpus import CorpusManifest, SplitData, load_split
from .emulator import format_class
from .errors import DataError
from .gan import GAN, PSNR_CAP, frame_psnr, predict, reconstruct_indices, wrong_labels
from .pgm import write_pgm

REPORT_VERSION = 1


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed ``[true, predicted]`` over ``labels`` (ascending)."""

    labels: tuple
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_rows(self) -> list[list[str]]:
        head = ["true\\pred"] + [str(x) for x in self.labels]
        return [head] + [[str(t)] + [str(int(v)) for v in row] for t, row in zip(self.labels, self.counts)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.to_rows())
        return buf.getvalue()

    def to_text(self, title: str = "") -> str:
        rows = self.to_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [title] if title else []
        lines += ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "counts": self.counts.astype(int).tolist(), "accuracy": self.accuracy}


def confusion(pred: Sequence, true: Sequence, labels: Sequence) -> ConfusionMatrix:
    """Tally predicted against true class values; both must come from ``labels``."""
    pred, true = list(pred), list(true)
    if len(pred) != len(true):
        raise DataError(f"{len(pred)} predictions for {len(true)} labels")
    labels = tuple(labels)
    pos = {v: i for i, v in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(pred, true):
        if p not in pos or t not in pos:
            bad = p if p not in pos else t
            raise DataError(f"class value {bad!r} not among {labels}")
        counts[pos[t], pos[p]] += 1
    return ConfusionMatrix(labels, counts)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for frames in [0, 1]; identical frames give ``math.inf``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise DataError("psnr of empty frames")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _joint_labels(classes) -> tuple[str, ...]:
    return tuple(f"{format_class(s.data_rate)}/{format_class(s.packet_loss)}" for s in classes.conditions)


@dataclass
class ModelScores:
    name: str
    inputs: str
    rate: ConfusionMatrix
    loss: ConfusionMatrix
    joint: ConfusionMatrix

    @property
    def accuracies(self) -> dict:
        return {"rate_acc": self.rate.accuracy, "loss_acc": self.loss.accuracy, "joint_acc": self.joint.accuracy}

    def to_dict(self) -> dict:
        return {"model": self.name, "inputs": self.inputs, **self.accuracies,
                "confusion": {"rate": self.rate.to_dict(), "loss": self.loss.to_dict(), "joint": self.joint.to_dict()}}


def score(name: str, inputs: str, data: SplitData, classes, rate_idx: np.ndarray, loss_idx: np.ndarray) -> ModelScores:
    jl = _joint_labels(classes)
    true_j = classes.joint_index(data.rate_idx, data.loss_idx)
    pred_j = classes.joint_index(rate_idx, loss_idx)
    s = ModelScores(
        name, inputs,
        confusion([classes.rates[i] for i in rate_idx], [classes.rates[i] for i in data.rate_idx], classes.rates),
        confusion([classes.losses[i] for i in loss_idx], [classes.losses[i] for i in data.loss_idx], classes.losses),
        confusion([jl[i] for i in pred_j], [jl[i] for i in true_j], jl),
    )
    if s.joint.accuracy > min(s.rate.accuracy, s.loss.accuracy) + 1e-12:
        raise AssertionError("joint accuracy exceeds a per-label accuracy")
    return s


def _gan_indices(gan: GAN, data: SplitData) -> tuple[np.ndarray, np.ndarray]:
    preds = predict(gan, data.received)
    return (np.array([p.rate_idx for p in preds], dtype=np.int64),
            np.array([p.loss_idx for p in preds], dtype=np.int64))


def _per_condition(data: SplitData, classes, values: dict[str, np.ndarray]) -> list[dict]:
    rows = []
    for r, rate in enumerate(classes.rates):
        for l, loss in enumerate(classes.losses):
            m = (data.rate_idx == r) & (data.loss_idx == l)
            row = {"rate": rate, "loss": loss, "n": int(m.sum())}
            for key, v in values.items():
                row[key] = float(v[m].mean()) if m.any() else None
            rows.append(row)
    return rows


def _triptych(original: np.ndarray, degraded: np.ndarray, restored: np.ndarray, gap: int = 2) -> np.ndarray:
    h = original.shape[0]
    sep = np.ones((h, gap))
    return np.concatenate([original, sep, degraded, sep, restored], axis=1)


@dataclass
class EvalReport:
    data: dict
    scores: list[ModelScores]

    def comparison_rows(self) -> list[dict]:
        return [{"model": s.name, "inputs": s.inputs, **{k: f"{v:.4f}" for k, v in s.accuracies.items()}}
                for s in self.scores]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def evaluate(manifest: CorpusManifest, split: str = "test", gan: GAN | None = None,
             baseline: Baseline | None = None, out_dir: str | os.PathLike | None = None,
             n_samples: int | None = None, figures: bool = True) -> EvalReport:
    """Score the given models on ``split`` and, if ``out_dir`` is set, persist every artifact.

    Artifacts: ``report.json``, ``confusion_rate.csv``, ``confusion_loss.csv``
    and ``confusion_joint.csv`` (first model), ``comparison.csv``, one PGM
    triptych (original | degraded | reconstructed) per condition under
    ``samples/``, and PNG figures when ``figures`` is true.
    """
    if gan is None and baseline is None:
        raise DataError("evaluate needs at least one model")
    classes = manifest.classes
    for model in (gan, baseline):
        if model is not None:
            model.check_classes(classes)
            if tuple(model.frame_shape) != manifest.frame_shape:
                raise DataError(f"model input {tuple(model.frame_shape)} != corpus frames {manifest.frame_shape}")
    data = load_split(manifest, split)
    report: dict = {
        "report_version": REPORT_VERSION,
        "split": split,
        "n_samples": len(data),
        "class_sets": classes.to_dict(),
        "corpus_hash": manifest.config_hash(),
        "models": {},
    }
    scores: list[ModelScores] = []
    restored = None

    if gan is not None:
        ri, li = _gan_indices(gan, data)
        s = score("vqosgan", "received", data, classes, ri, li)
        scores.append(s)
        entry = s.to_dict()
        if split != "train":
            train = load_split(manifest, "train")
            tri, tli = _gan_indices(gan, train)
            entry["train_accuracy"] = score("vqosgan", "received", train, classes, tri, tli).accuracies
        deg = frame_psnr(data.received, data.original)
        restored = reconstruct_indices(gan, data.received, data.rate_idx, data.loss_idx)
        rec = frame_psnr(restored, data.original)
        two_stage = frame_psnr(reconstruct_indices(gan, data.received, ri, li), data.original)
        wr, wl = wrong_labels(classes, data.rate_idx, data.loss_idx)
        wrong = frame_psnr(reconstruct_indices(gan, data.received, wr, wl), data.original)
        entry["psnr"] = {
            "degraded": float(deg.mean()),
            "reconstructed_true_labels": float(rec.mean()),
            "reconstructed_predicted_labels": float(two_stage.mean()),
            "reconstructed_wrong_labels": float(wrong.mean()),
            "uplift_db": float(rec.mean() - deg.mean()),
            "cap_db": PSNR_CAP,
            "per_condition": _per_condition(data, classes, {"degraded": deg, "reconstructed": rec, "wrong_label": wrong}),
        }
        report["models"]["vqosgan"] = entry

    if baseline is not None:
        r, l = baseline.logits(data.original, data.received)
        s = score("baseline_cnn", "original+received", data, classes, r.argmax(axis=1), l.argmax(axis=1))
        scores.append(s)
        report["models"]["baseline_cnn"] = s.to_dict()

    result = EvalReport(report, scores)
    if out_dir is not None:
        _persist(result, manifest, data, restored, Path(out_dir), n_samples, figures)
    return result


def _persist(result: EvalReport, manifest: CorpusManifest, data: SplitData, restored: np.ndarray | None,
             out: Path, n_samples: int | None, figures: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(result.to_json())
    primary = result.scores[0]
    (out / "confusion_rate.csv").write_text(primary.rate.to_csv())
    (out / "confusion_loss.csv").write_text(primary.loss.to_csv())
    (out / "confusion_joint.csv").write_text(primary.joint.to_csv())
    for s in result.scores[1:]:
        (out / f"confusion_rate_{s.name}.csv").write_text(s.rate.to_csv())
        (out / f"confusion_loss_{s.name}.csv").write_text(s.loss.to_csv())
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "rate_acc", "loss_acc", "joint_acc", "inputs"], lineterminator="\n")
        w.writeheader()
        w.writerows(result.comparison_rows())

    sample_idx = []
    if restored is not None:
        samples = out / "samples"
        samples.mkdir(exist_ok=True)
        seen = set()
        for i, rec in enumerate(data.records):
            key = (rec["rate"], rec["loss"])
            if key in seen:
                continue
            seen.add(key)
            sample_idx.append(i)
            if n_samples is not None and len(sample_idx) >= n_samples:
                break
        for i in sample_idx:
            rec = data.records[i]
            name = Path(rec["degraded"]).stem
            write_pgm(samples / f"{name}.pgm", _triptych(data.original[i, 0], data.received[i, 0], restored[i, 0]))

    if figures:
        from . import plotting

        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        for s in result.scores:
            plotting.plot_confusions(s, fig_dir / f"confusion_{s.name}.png")
        plotting.plot_comparison(result.scores, fig_dir / "comparison.png")
        gan_entry = result.data["models"].get("vqosgan")
        if gan_entry is not None:
            plotting.plot_psnr_by_condition(gan_entry["psnr"]["per_condition"], fig_dir / "psnr_by_condition.png")
        if restored is not None and sample_idx:
            plotting.plot_samples([(data.records[i], data.original[i, 0], data.received[i, 0], restored[i, 0])
                                   for i in sample_idx], fig_dir / "samples.png")
