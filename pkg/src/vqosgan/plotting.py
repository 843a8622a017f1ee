"""Matplotlib figures for evaluation and training reports (rendered off-screen)."""

from __future__ import annotations

import csv
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def _heatmap(ax, cm, title: str) -> None:
    counts = np.asarray(cm.counts)
    ax.imshow(counts, cmap="Blues")
    ticks = range(len(cm.labels))
    ax.set_xticks(ticks, [str(x) for x in cm.labels], rotation=45 if len(cm.labels) > 3 else 0)
    ax.set_yticks(ticks, [str(x) for x in cm.labels])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"{title} (acc {cm.accuracy:.3f})")
    hi = counts.max() if counts.size else 0
    for (i, j), v in np.ndenumerate(counts):
        ax.text(j, i, str(int(v)), ha="center", va="center", color="white" if v > hi / 2 else "black")


def plot_confusions(scores, path: str | os.PathLike) -> None:
    """Rate, loss and joint confusion heatmaps side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(15, 4.8))
    _heatmap(axes[0], scores.rate, "data rate (kbps)")
    _heatmap(axes[1], scores.loss, "packet loss (%)")
    _heatmap(axes[2], scores.joint, "joint")
    fig.suptitle(f"{scores.name} ({scores.inputs})")
    fig.tight_layout()
    _save(fig, path)


def plot_comparison(scores: Sequence, path: str | os.PathLike) -> None:
    keys = ("rate_acc", "loss_acc", "joint_acc")
    fig, ax = plt.subplots(figsize=(6.5, 4))
    width = 0.8 / max(len(scores), 1)
    x = np.arange(len(keys))
    for i, s in enumerate(scores):
        acc = s.accuracies
        bars = ax.bar(x + i * width, [acc[k] for k in keys], width, label=f"{s.name} ({s.inputs})")
        ax.bar_label(bars, fmt="%.2f", fontsize=8)
    ax.set_xticks(x + width * (len(scores) - 1) / 2, ["rate", "loss", "joint"])
    ax.set_ylim(0, 1.08)
    ax.set_ylabel("test accuracy")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_psnr_by_condition(rows: Sequence[dict], path: str | os.PathLike) -> None:
    labels = [f"{r['rate']:g}/{r['loss']:g}" for r in rows]
    series = [("degraded", "degraded"), ("reconstructed", "reconstructed"), ("wrong_label", "wrong label")]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, (key, name) in enumerate(series):
        vals = [r.get(key) if r.get(key) is not None else np.nan for r in rows]
        ax.bar(x + (i - 1) * 0.27, vals, 0.27, label=name)
    ax.set_xticks(x, labels)
    ax.set_xlabel("condition (kbps / loss %)")
    ax.set_ylabel("mean PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_samples(samples: Sequence[tuple], path: str | os.PathLike) -> None:
    """One row per sample: original, degraded, reconstructed."""
    n = len(samples)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2.1 * n), squeeze=False)
    for row, (rec, org, deg, out) in zip(axes, samples):
        for ax, img, title in zip(row, (org, deg, out), ("original", "degraded", "reconstructed")):
            ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(title, fontsize=8)
        row[0].set_ylabel(f"{rec['rate']:g} / {rec['loss']:g}", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_training(metrics_csv: str | os.PathLike, path: str | os.PathLike) -> None:
    """Loss and accuracy curves from a per-epoch metrics CSV."""
    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(11, 4))
    if rows:
        epochs = [int(r["epoch"]) for r in rows]
        for key in rows[0]:
            if key == "epoch":
                continue
            vals = [float(r[key]) for r in rows]
            if key.endswith("_acc"):
                ax_a.plot(epochs, vals, marker=".", label=key)
            elif key != "psnr":
                ax_l.plot(epochs, vals, marker=".", label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("train accuracy")
    ax_a.set_ylim(0, 1.02)
    for ax in (ax_l, ax_a):
        if ax.lines:
            ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
