import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vqosgan.corpus import (
    CorpusConfig, CorpusError, CorpusManifest, build_corpus, load_batch, load_split, source_frames, split_ids,
    verify_corpus,
)
from vqosgan.pgm import PGMError, decode_pgm, encode_pgm, read_pgm, write_pgm
from vqosgan.synth import MOTIFS, gen_video


# ---------------------------------------------------------------------------
# PGM


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_pgm_round_trip_is_exact(pixels):
    frame = pixels / 255.0
    back = decode_pgm(encode_pgm(frame))
    np.testing.assert_array_equal(back, frame)


def test_pgm_rounding_rule():
    data = encode_pgm(np.array([[0.0, 0.5 / 255, 0.49 / 255, 1.0, 1.2]]))
    assert data.endswith(bytes([0, 1, 0, 255, 255]))
    assert data.startswith(b"P5\n5 1\n255\n")


def test_pgm_header_comments_accepted():
    assert decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x00\xff").tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize("blob,match", [
    (b"P2\n1 1\n255\n0", "P5"),
    (b"P5\n2 2\n255\n\x00", "expected 4"),
    (b"P5\n1 1\n65535\n\x00\x00", "maxval"),
    (b"garbage", "P5"),
])
def test_pgm_malformed_rejected(blob, match):
    with pytest.raises(PGMError, match=match):
        decode_pgm(blob)


def test_pgm_rejects_multichannel_and_missing(tmp_path):
    with pytest.raises(PGMError):
        encode_pgm(np.zeros((2, 2, 3)))
    with pytest.raises(FileNotFoundError, match="missing image"):
        read_pgm(tmp_path / "nope.pgm")
    write_pgm(tmp_path / "a.pgm", np.zeros((3, 4)))
    assert read_pgm(tmp_path / "a.pgm").shape == (3, 4)


# ---------------------------------------------------------------------------
# synthetic video


@pytest.mark.parametrize("motif", MOTIFS)
def test_gen_video_deterministic_and_in_range(motif):
    a = gen_video(11, 4, (24, 32), motif)
    b = gen_video(11, 4, (24, 32), motif)
    assert len(a) == 4
    for x, y in zip(a, b):
        assert x.shape == (24, 32)
        assert x.tobytes() == y.tobytes()
        assert x.min() >= 0.0 and x.max() <= 1.0
    assert gen_video(12, 1, (24, 32), motif)[0].tobytes() != a[0].tobytes()


@pytest.mark.parametrize("motif", MOTIFS)
def test_gen_video_temporally_coherent(motif):
    frames = gen_video(3, 6, (32, 32), motif)
    for f, g in zip(frames, frames[1:]):
        assert np.abs(f - g).mean() < 0.2


@pytest.mark.parametrize("seed", range(10))
def test_moving_rectangle_diff_bounded_by_perimeter_times_speed(seed):
    info = {}
    frames = gen_video(seed, 8, (48, 48), "moving-rectangle", motion=info)
    vy, vx = info["velocity"]
    speed = abs(vy) + abs(vx)
    perimeter = 2 * (info["height"] + info["width"])
    for f, g in zip(frames, frames[1:]):
        assert int((f != g).sum()) <= 2 * perimeter * speed


def test_gen_video_rejects_bad_arguments():
    with pytest.raises(ValueError, match="motif"):
        gen_video(0, 2, motif="spiral")
    with pytest.raises(ValueError):
        gen_video(0, 0)


# ---------------------------------------------------------------------------
# corpus


def test_corpus_arithmetic_and_files(tmp_path):
    cfg = CorpusConfig(n_frames=100, frames_per_video=10, size=(16, 16))
    m = build_corpus(cfg, tmp_path)
    assert len(m.records) == 600
    assert len(list((tmp_path / "degraded").iterdir())) == 600
    assert len(list((tmp_path / "original").iterdir())) == 100
    assert verify_corpus(m) == []
    assert m.classes.rates == (1200.0, 1600.0)
    assert m.classes.losses == (0.05, 0.1, 0.25)


def test_corpus_split_is_stratified_and_leak_free(tiny_corpus):
    m = tiny_corpus
    per_frame = {}
    for r in m.records:
        assert per_frame.setdefault(r["frame_id"], r["split"]) == r["split"]
    cfg_test = round(24 * 0.2)
    counts = Counter((r["rate"], r["loss"], r["split"]) for r in m.records)
    for state in m.classes.conditions:
        assert abs(counts[(state.data_rate, state.packet_loss, "test")] - cfg_test) <= 1
        assert counts[(state.data_rate, state.packet_loss, "train")] == 24 - cfg_test


def test_corpus_header_line(tiny_corpus):
    first = json.loads((tiny_corpus.root / "manifest.jsonl").read_text().splitlines()[0])
    assert first["kind"] == "header"
    assert first["class_sets"] == {"rates": [1200.0, 1600.0], "losses": [0.05, 0.1, 0.25]}
    assert first["frame_size"] == [16, 16]
    assert "emulator_hash" in first and "generator_version" in first


def test_degraded_differs_from_original(tiny_corpus):
    data = load_split(tiny_corpus, "train")
    same = [(data.received[i] == data.original[i]).all() for i in range(len(data))]
    assert not any(same)


def test_rebuild_is_byte_identical(tmp_path):
    cfg = CorpusConfig(n_frames=12, frames_per_video=4, size=(16, 16), seed=9)
    a, b = build_corpus(cfg, tmp_path / "a"), build_corpus(cfg, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert a.config_hash() == b.config_hash()


def test_parallel_build_matches_serial(tmp_path):
    cfg = CorpusConfig(n_frames=8, frames_per_video=4, size=(16, 16), seed=2)
    build_corpus(cfg, tmp_path / "serial")
    build_corpus(cfg, tmp_path / "par", workers=2)
    for p in (tmp_path / "serial").rglob("*.pgm"):
        assert p.read_bytes() == (tmp_path / "par" / p.relative_to(tmp_path / "serial")).read_bytes()


def test_missing_manifest_means_invalid_corpus(tmp_path):
    cfg = CorpusConfig(n_frames=6, frames_per_video=3, size=(16, 16))
    build_corpus(cfg, tmp_path)
    (tmp_path / "manifest.jsonl").unlink()
    with pytest.raises(CorpusError, match="incomplete"):
        CorpusManifest.load(tmp_path)


def test_verify_reports_missing_files(tmp_path):
    cfg = CorpusConfig(n_frames=10, frames_per_video=5, size=(16, 16))
    m = build_corpus(cfg, tmp_path)
    (tmp_path / m.records[0]["degraded"]).unlink()
    problems = verify_corpus(m)
    assert any("missing file" in p for p in problems)
    with pytest.raises(FileNotFoundError, match=m.records[0]["degraded"].split("/")[-1]):
        load_split(m, m.records[0]["split"])


def test_config_validation():
    with pytest.raises(CorpusError):
        CorpusConfig(train_fraction=1.0)
    with pytest.raises(CorpusError, match="motif"):
        CorpusConfig(motifs=("spiral",))
    with pytest.raises(Exception, match="unknown data-rate"):
        CorpusConfig(rates=(1000,))


def test_source_frames_and_split_ids_are_deterministic():
    cfg = CorpusConfig(n_frames=13, frames_per_video=5, size=(16, 16))
    assert len(source_frames(cfg)) == 13
    assert split_ids(cfg) == split_ids(cfg)
    assert sum(v == "test" for v in split_ids(cfg).values()) == cfg.n_test()


def test_load_batch_visits_every_record_once(tiny_corpus):
    n = len(tiny_corpus.split("train"))
    ids_a = [r["degraded"] for b in load_batch(tiny_corpus, "train", 7, 1) for r in b.records]
    ids_b = [r["degraded"] for b in load_batch(tiny_corpus, "train", 7, 2) for r in b.records]
    assert len(ids_a) == n and sorted(ids_a) == sorted(ids_b)
    assert ids_a != ids_b
    whole = list(load_batch(tiny_corpus, "train", 10_000, 1))
    assert len(whole) == 1 and len(whole[0]) == n


def test_batch_arrays_and_labels(tiny_corpus):
    batch = next(iter(load_batch(tiny_corpus, "test", 64, 0)))
    assert batch.received.shape[1:] == (1, 16, 16)
    assert batch.received.min() >= 0 and batch.received.max() <= 1
    for rec, r, l in zip(batch.records, batch.rate_idx, batch.loss_idx):
        assert tiny_corpus.classes.rates[r] == rec["rate"]
        assert tiny_corpus.classes.losses[l] == rec["loss"]
    # (1600 kbps, 0.25 %) is rate index 1 and loss index 2 under ascending order
    assert tiny_corpus.classes.indices(tiny_corpus.classes.state(1, 2)) == (1, 2)
    planes = tiny_corpus.classes.label_planes([1], [2], 2, 2)
    np.testing.assert_array_equal(planes[0, :, 0, 0], [0, 1, 0, 0, 1])


def test_unknown_split_rejected(tiny_corpus):
    with pytest.raises(CorpusError, match="split"):
        tiny_corpus.split("validation")
