"""Command-line entry point: corpus generation, training, evaluation and inference.

Machine-readable JSON goes to stdout; logs and human tables go to stderr.
Exit codes: 0 ok, 2 usage, 3 data/corpus, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .baseline import Baseline, BaselineConfig, baseline_train
from .corpus import CorpusConfig, CorpusManifest, build_corpus, verify_corpus
from .emulator import DEFAULT_LOSSES, DEFAULT_RATES, NetworkState, RateConfig, format_class
from .errors import DataError, NumericError
from .evaluation import evaluate
from .gan import GAN, TrainConfig, predict, reconstruct, train
from .pgm import read_pgm, write_pgm
from .synth import MOTIFS

log = logging.getLogger("vqosgan")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5
PREDICT_SCHEMA = "vqosgan.predict/1"
RECONSTRUCT_SCHEMA = "vqosgan.reconstruct/1"


def _floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise click.BadParameter("empty list")
    return vals


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in str(text).lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise click.BadParameter("size must be positive")
    return h, w


def _emit(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


def _log_config(command: str, resolved: dict) -> None:
    log.info("resolved config for %s: %s", command, json.dumps(resolved, sort_keys=True, default=str))


def _extra(ctx: click.Context, section: str, allowed: set[str]) -> dict:
    """Config-file keys for ``section`` that have no CLI flag; unknown keys are usage errors."""
    overlay = (ctx.find_root().obj or {}).get("overlay", {}).get(section, {})
    params = {p.name for p in ctx.command.params}
    extra = {k: v for k, v in overlay.items() if k.replace("-", "_") not in params}
    unknown = sorted(set(extra) - allowed)
    if unknown:
        raise click.UsageError(f"unknown keys in config section {section!r}: {unknown}")
    return extra


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON overlay keyed by subcommand name; flags given on the command line win.")
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.version_option(__version__)
@click.pass_context
def cli(ctx: click.Context, config_path: str | None, log_level: str) -> None:
    """Network-state estimation and frame restoration from degraded video frames."""
    logging.basicConfig(level=log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    overlay = {}
    if config_path:
        try:
            overlay = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise click.UsageError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise click.UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(overlay, dict) or not all(isinstance(v, dict) for v in overlay.values()):
            raise click.UsageError("config file must map subcommand names to option objects")
        unknown = sorted(set(overlay) - set(cli.commands))
        if unknown:
            raise click.UsageError(f"config names unknown subcommands: {unknown}")
        ctx.default_map = {cmd: {k.replace("-", "_"): v for k, v in opts.items()} for cmd, opts in overlay.items()}
    ctx.obj = {"overlay": overlay}


@cli.command("gen-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Corpus directory.")
@click.option("--frames", default=200, show_default=True, help="Number of source frames.")
@click.option("--frames-per-video", default=10, show_default=True)
@click.option("--size", default="64x64", show_default=True, help="Frame size WxH.")
@click.option("--rates", default=",".join(format_class(r) for r in DEFAULT_RATES), show_default=True,
              help="Data-rate classes in kbps.")
@click.option("--losses", default=",".join(format_class(x) for x in DEFAULT_LOSSES), show_default=True,
              help="Packet-loss classes in percent.")
@click.option("--seed", default=0, show_default=True)
@click.option("--motif", "motifs", multiple=True, type=click.Choice(MOTIFS),
              help="Restrict to these motifs (repeatable); default cycles through all.")
@click.option("--train-fraction", default=0.8, show_default=True)
@click.option("--workers", default=1, show_default=True, help="Processes for the degradation pass.")
@click.pass_context
def gen_corpus(ctx, out_dir, frames, frames_per_video, size, rates, losses, seed, motifs, train_fraction, workers):
    """Generate synthetic videos, degrade them under every condition, write PGMs and a manifest."""
    extra = _extra(ctx, "gen-corpus", {"q_table", "block", "mtu", "loss_scale", "detail_max_q"})
    rates_t, losses_t = _floats(rates), _floats(losses)
    emu_kw = {k: v for k, v in extra.items() if k != "q_table"}
    if "q_table" in extra:
        emulator = RateConfig({float(k): int(v) for k, v in extra["q_table"].items()}, **emu_kw)
    else:
        emulator = RateConfig.for_rates(rates_t, **emu_kw)
    cfg = CorpusConfig(n_frames=frames, frames_per_video=frames_per_video, size=_size(size), rates=rates_t,
                       losses=losses_t, seed=seed, motifs=tuple(motifs) or MOTIFS, train_fraction=train_fraction,
                       emulator=emulator)
    _log_config("gen-corpus", {"out": out_dir, "n_frames": cfg.n_frames, "frames_per_video": cfg.frames_per_video,
                               "size": cfg.size, "rates": cfg.rates, "losses": cfg.losses, "seed": cfg.seed,
                               "motifs": cfg.motifs, "train_fraction": cfg.train_fraction,
                               "emulator": emulator.to_dict(), "workers": workers})
    manifest = build_corpus(cfg, out_dir, workers=workers)
    problems = verify_corpus(manifest)
    if problems:
        raise DataError("corpus failed verification: " + "; ".join(problems[:5]))
    _emit({"corpus": str(manifest.root), "records": len(manifest.records), "corpus_hash": manifest.config_hash(),
           "classes": manifest.classes.to_dict()})


def _load_manifest(path: str) -> CorpusManifest:
    manifest = CorpusManifest.load(path)
    problems = verify_corpus(manifest)
    if problems:
        raise DataError(f"corpus {path} failed verification: " + "; ".join(problems[:5]))
    return manifest


def _train_gan(ctx, manifest, out, epochs, batch, seed, latent, extra):
    fields = dict(extra)
    fields.update(epochs=epochs, batch_size=batch, seed=seed, latent_dim=latent)
    cfg = TrainConfig.from_dict(fields)
    _log_config("train", {"model": "gan", "corpus": str(manifest.root), "out": out, **cfg.to_dict()})
    return train(cfg, manifest, out)


def _train_baseline(ctx, manifest, out, epochs, batch, seed, extra):
    fields = dict(extra)
    fields.update(epochs=epochs, batch_size=batch, seed=seed)
    cfg = BaselineConfig.from_dict(fields)
    _log_config("train", {"model": "baseline", "corpus": str(manifest.root), "out": out, **cfg.to_dict()})
    return baseline_train(cfg, manifest, out)


def _training_figure(result) -> None:
    from .plotting import plot_training

    plot_training(result.metrics_csv, result.metrics_csv.with_suffix(".png"))


_GAN_KEYS = {f for f in TrainConfig.__dataclass_fields__} - {"epochs", "batch_size", "seed", "latent_dim"}
_BASE_KEYS = {f for f in BaselineConfig.__dataclass_fields__} - {"epochs", "batch_size", "seed"}


@cli.command("train")
@click.option("--corpus", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for checkpoints and the metrics CSV.")
@click.option("--model", type=click.Choice(["gan", "baseline"]), default="gan", show_default=True)
@click.option("--epochs", default=TrainConfig.epochs, show_default=True)
@click.option("--batch", default=TrainConfig.batch_size, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--latent", default=TrainConfig.latent_dim, show_default=True, help="Generator latent size.")
@click.pass_context
def train_cmd(ctx, corpus, out_dir, model, epochs, batch, seed, latent):
    """Train the conditional GAN (default) or the paired-input baseline.

    Further hyperparameters (learning rates, loss weights, widths) come from
    the --config overlay's "train" section.
    """
    manifest = _load_manifest(corpus)
    if model == "gan":
        result = _train_gan(ctx, manifest, out_dir, epochs, batch, seed, latent, _extra(ctx, "train", _GAN_KEYS))
    else:
        result = _train_baseline(ctx, manifest, out_dir, epochs, batch, seed, _extra(ctx, "train", _BASE_KEYS))
    _training_figure(result)
    _emit({"model": model, "checkpoint": str(result.checkpoint), "metrics": str(result.metrics_csv),
           "epochs": epochs, "final": result.history[-1] if result.history else None})


def _report(manifest, split, gan, baseline, report_dir, samples):
    result = evaluate(manifest, split, gan=gan, baseline=baseline, out_dir=report_dir, n_samples=samples)
    for s in result.scores:
        click.echo(s.rate.to_text(f"[{s.name}] data rate (kbps), accuracy {s.rate.accuracy:.4f}"), err=True)
        click.echo(s.loss.to_text(f"[{s.name}] packet loss (%), accuracy {s.loss.accuracy:.4f}"), err=True)
        click.echo(f"[{s.name}] joint accuracy {s.joint.accuracy:.4f}\n", err=True)
    summary = {"report": str(report_dir), "split": split,
               "models": {s.name: s.accuracies for s in result.scores}}
    if gan is not None:
        ps = result.data["models"]["vqosgan"]["psnr"]
        summary["psnr"] = {k: ps[k] for k in ("degraded", "reconstructed_true_labels",
                                              "reconstructed_wrong_labels", "uplift_db")}
        click.echo(f"[vqosgan] PSNR degraded {ps['degraded']:.2f} dB -> reconstructed "
                   f"{ps['reconstructed_true_labels']:.2f} dB (wrong labels {ps['reconstructed_wrong_labels']:.2f})",
                   err=True)
    return summary


@cli.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False),
              help="GAN checkpoint (or a baseline checkpoint on its own).")
@click.option("--baseline", "baseline_path", type=click.Path(dir_okay=False), default=None,
              help="Optional baseline checkpoint for the comparison table.")
@click.option("--corpus", required=True, type=click.Path(file_okay=False))
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.option("--report", "report_dir", required=True, type=click.Path(file_okay=False))
@click.option("--samples", default=6, show_default=True, help="Sample triptychs to write.")
def eval_cmd(model_path, baseline_path, corpus, split, report_dir, samples):
    """Confusion matrices, accuracy comparison and reconstruction PSNR on a corpus split."""
    _log_config("eval", {"model": model_path, "baseline": baseline_path, "corpus": corpus, "split": split,
                         "report": report_dir, "samples": samples})
    manifest = _load_manifest(corpus)
    gan, baseline = _load_any(model_path)
    if baseline_path:
        if baseline is not None:
            raise click.UsageError("--model is already a baseline checkpoint")
        baseline, _ = Baseline.load(baseline_path)
    _emit(_report(manifest, split, gan, baseline, report_dir, samples))


def _load_any(path: str):
    from .checkpoint import load_checkpoint

    _, meta = load_checkpoint(path)
    if meta.get("model_kind") == "baseline_cnn":
        return None, Baseline.load(path)[0]
    return GAN.load(path)[0], None


@cli.command("compare")
@click.option("--corpus", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Run directory: gan/, baseline/ and report/ are created inside.")
@click.option("--epochs", default=TrainConfig.epochs, show_default=True, help="GAN epochs.")
@click.option("--baseline-epochs", default=BaselineConfig.epochs, show_default=True)
@click.option("--batch", default=TrainConfig.batch_size, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--samples", default=6, show_default=True)
@click.pass_context
def compare_cmd(ctx, corpus, out_dir, epochs, baseline_epochs, batch, seed, samples):
    """Train the GAN and the baseline on one corpus, then write the comparison report.

    The --config overlay's "compare" section may hold "gan" and "baseline"
    objects with further hyperparameters for each model.
    """
    manifest = _load_manifest(corpus)
    out = Path(out_dir)
    extra = _extra(ctx, "compare", {"gan", "baseline"})
    gan_extra, base_extra = dict(extra.get("gan", {})), dict(extra.get("baseline", {}))
    for name, given, allowed in (("gan", gan_extra, _GAN_KEYS), ("baseline", base_extra, _BASE_KEYS)):
        unknown = sorted(set(given) - allowed)
        if unknown:
            raise click.UsageError(f"unknown keys in config section compare.{name}: {unknown}")
    _log_config("compare", {"corpus": corpus, "out": out_dir, "epochs": epochs, "baseline_epochs": baseline_epochs,
                            "batch": batch, "seed": seed, "gan_overrides": gan_extra, "baseline_overrides": base_extra})
    t0 = time.perf_counter()
    g = _train_gan(ctx, manifest, str(out / "gan"), epochs, batch, seed, TrainConfig.latent_dim, gan_extra)
    t1 = time.perf_counter()
    _training_figure(g)
    t2 = time.perf_counter()
    b = _train_baseline(ctx, manifest, str(out / "baseline"), baseline_epochs, batch, seed, base_extra)
    t3 = time.perf_counter()
    _training_figure(b)
    gan, _ = GAN.load(g.checkpoint)
    baseline, _ = Baseline.load(b.checkpoint)
    summary = _report(manifest, "test", gan, baseline, out / "report", samples)
    summary["comparison"] = str(out / "report" / "comparison.csv")
    # wall time is reported on stdout only; the files on disk stay reproducible
    summary["train_seconds"] = {"vqosgan": round(t1 - t0, 1), "baseline_cnn": round(t3 - t2, 1)}
    _emit(summary)


def _read_frame(path: str) -> np.ndarray:
    return read_pgm(path)


def _parse_labels(text: str) -> NetworkState:
    parts = text.split(",")
    if len(parts) != 2:
        raise click.BadParameter(f"expected RATE,LOSS, got {text!r}", param_hint="--labels")
    try:
        return NetworkState(float(parts[0]), float(parts[1]))
    except ValueError:
        raise click.BadParameter(f"expected numbers, got {text!r}", param_hint="--labels") from None


@cli.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--frame", "frame_path", required=True, type=click.Path(dir_okay=False), help="Received frame (PGM).")
def predict_cmd(model_path, frame_path):
    """Estimate (data rate, packet loss) from a received frame alone; prints JSON."""
    _log_config("predict", {"model": model_path, "frame": frame_path})
    gan, _ = GAN.load(model_path)
    pred = predict(gan, _read_frame(frame_path))[0]
    _emit({"schema": PREDICT_SCHEMA, "frame": frame_path, **pred.to_dict()})


@cli.command("reconstruct")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--frame", "frame_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Output PGM.")
@click.option("--labels", default=None, help="RATE,LOSS to condition on; predicted when omitted.")
def reconstruct_cmd(model_path, frame_path, out_path, labels):
    """Restore a received frame, conditioning on given or predicted network-state labels."""
    _log_config("reconstruct", {"model": model_path, "frame": frame_path, "out": out_path, "labels": labels})
    gan, _ = GAN.load(model_path)
    frame = _read_frame(frame_path)
    if labels is None:
        state = predict(gan, frame)[0].state
        source = "predicted"
    else:
        state = _parse_labels(labels)
        source = "given"
    restored = reconstruct(gan, frame, state)[0, 0]
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out_path, restored)
    _emit({"schema": RECONSTRUCT_SCHEMA, "frame": frame_path, "out": out_path, "labels_source": source,
           "data_rate": state.data_rate, "packet_loss": state.packet_loss})


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="vqosgan", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (DataError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
