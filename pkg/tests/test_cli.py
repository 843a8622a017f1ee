import hashlib
import json

import numpy as np
import pytest

from vqosgan import cli as cli_mod
from vqosgan.cli import main
from vqosgan.errors import NumericError
from vqosgan.pgm import read_pgm, write_pgm

TINY_TRAIN = {"g_channels": [2, 3, 4], "d_channels": [2, 3, 3, 4]}


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"train": TINY_TRAIN}))
    assert main(["gen-corpus", "--out", str(root / "corpus"), "--frames", "12", "--frames-per-video", "6",
                 "--size", "16x16", "--seed", "1"]) == 0
    assert main(["--config", str(cfg), "train", "--corpus", str(root / "corpus"), "--out", str(root / "run"),
                 "--epochs", "1", "--batch", "8", "--latent", "8"]) == 0
    return root


def test_help_documents_defaults(capsys):
    for cmd, needle in [("gen-corpus", "default: 200"), ("train", "default: gan"), ("eval", "default: test"),
                        ("compare", "default:")]:
        code, out, _ = run(capsys, cmd, "--help")
        assert code == 0 and needle in out, cmd
    code, out, _ = run(capsys, "--help")
    assert code == 0 and "reconstruct" in out and "predict" in out


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "train", "--bogus")
    assert code == 2 and "bogus" in err


def test_unknown_config_key_is_usage_error(capsys, tmp_path, trained):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"warmup": 3}}))
    code, _, err = run(capsys, "--config", cfg, "train", "--corpus", trained / "corpus", "--out", tmp_path / "r")
    assert code == 2 and "warmup" in err
    cfg.write_text("{not json")
    assert run(capsys, "--config", cfg, "train", "--corpus", trained / "corpus", "--out", tmp_path / "r")[0] == 2


def test_gen_corpus_zero_loss_and_rerun_hash(capsys, tmp_path):
    args = ["gen-corpus", "--frames", 10, "--frames-per-video", 5, "--size", "16x16", "--losses", "0"]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert len(list((tmp_path / "a" / "degraded").iterdir())) == 20


def test_missing_corpus_is_data_error(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--corpus", tmp_path / "nothing", "--out", tmp_path / "r")
    assert code == 3 and "error" in err


def test_train_writes_checkpoint_metrics_and_plot(trained):
    run_dir = trained / "run"
    assert (run_dir / "vqosgan.ckpt").is_file()
    assert (run_dir / "vqosgan_metrics.csv").is_file()
    assert (run_dir / "vqosgan_metrics.png").is_file()


def test_predict_emits_versioned_json(capsys, trained):
    frame = sorted((trained / "corpus" / "degraded").iterdir())[0]
    code, out, _ = run(capsys, "predict", "--model", trained / "run" / "vqosgan.ckpt", "--frame", frame)
    assert code == 0
    doc = json.loads(out)
    assert doc["schema"] == "vqosgan.predict/1"
    assert doc["data_rate"] in (1200, 1600) and doc["packet_loss"] in (0.05, 0.1, 0.25)
    again = run(capsys, "predict", "--model", trained / "run" / "vqosgan.ckpt", "--frame", frame)[1]
    assert again == out


def test_reconstruct_writes_same_size_pgm(capsys, trained, tmp_path):
    frame = sorted((trained / "corpus" / "degraded").iterdir())[0]
    ckpt = trained / "run" / "vqosgan.ckpt"
    code, out, _ = run(capsys, "reconstruct", "--model", ckpt, "--frame", frame, "--out", tmp_path / "r.pgm")
    assert code == 0 and json.loads(out)["labels_source"] == "predicted"
    assert read_pgm(tmp_path / "r.pgm").shape == read_pgm(frame).shape
    code, out, _ = run(capsys, "reconstruct", "--model", ckpt, "--frame", frame, "--out", tmp_path / "g.pgm",
                       "--labels", "1200,0.25")
    doc = json.loads(out)
    assert code == 0 and doc["schema"] == "vqosgan.reconstruct/1"
    assert (doc["labels_source"], doc["data_rate"], doc["packet_loss"]) == ("given", 1200, 0.25)


def test_malformed_pgm_is_rejected(capsys, trained, tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n16 16\n255\n\x00\x01")
    code, _, err = run(capsys, "predict", "--model", trained / "run" / "vqosgan.ckpt", "--frame", bad)
    assert code != 0 and "expected 256" in err


def test_wrong_frame_size_names_both_shapes(capsys, trained, tmp_path):
    write_pgm(tmp_path / "big.pgm", np.zeros((32, 32)))
    code, _, err = run(capsys, "predict", "--model", trained / "run" / "vqosgan.ckpt", "--frame", tmp_path / "big.pgm")
    assert code == 3 and "(1, 32, 32)" in err and "(1, 16, 16)" in err


def test_eval_prints_summary_and_writes_report(capsys, trained, tmp_path):
    code, out, err = run(capsys, "eval", "--model", trained / "run" / "vqosgan.ckpt", "--corpus", trained / "corpus",
                         "--report", tmp_path / "rep", "--samples", 2)
    assert code == 0
    summary = json.loads(out)
    assert "vqosgan" in json.dumps(summary)
    assert (tmp_path / "rep" / "report.json").is_file() and (tmp_path / "rep" / "comparison.csv").is_file()
    assert (tmp_path / "rep" / "figures" / "comparison.png").is_file()


def test_numeric_failure_maps_to_exit_code(capsys, trained, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite generator loss (nan) at batch 0, lr 0.0002")

    monkeypatch.setattr(cli_mod, "train", boom)
    code, _, err = run(capsys, "train", "--corpus", trained / "corpus", "--out", tmp_path / "r", "--epochs", 1)
    assert code == 4 and "batch 0" in err


def test_io_failure_maps_to_exit_code(capsys, trained, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "train", "--corpus", trained / "corpus", "--out", blocker / "sub", "--epochs", 0)
    assert code == 5 and err
