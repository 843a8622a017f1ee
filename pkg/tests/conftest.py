import contextlib
import io
import json

import numpy as np
import pytest

from vqosgan.cli import main
from vqosgan.corpus import CorpusConfig, build_corpus
from vqosgan.emulator import RateConfig
from vqosgan.gan import TrainConfig

# PASS/FAIL lines from the acceptance tests, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def smooth_fd(f, x: np.ndarray, idx, h: float = 1e-5):
    """Central difference of ``f()`` at ``x[idx]``, or None when a ReLU or L1 kink lies within ``h``.

    A kink shows up as one-sided slopes that disagree; the gradient is undefined there.
    """
    old = x[idx]
    f0 = f()
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    right, left = (fp - f0) / h, (f0 - fm) / h
    if abs(right - left) > 1e-3 * max(abs(right) + abs(left), 1e-6):
        return None
    return (fp - fm) / (2 * h)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """24 frames of 16x16 under the default 2x3 condition grid."""
    cfg = CorpusConfig(n_frames=24, frames_per_video=6, size=(16, 16), seed=3)
    return build_corpus(cfg, tmp_path_factory.mktemp("tiny_corpus"))


@pytest.fixture(scope="session")
def clean_corpus(tmp_path_factory):
    """Zero-loss, finest-rate corpus for autoencoder sanity checks."""
    emu = RateConfig.for_rates((1600,))
    cfg = CorpusConfig(n_frames=10, frames_per_video=5, size=(16, 16), rates=(1600,), losses=(0.0,),
                       emulator=emu, seed=5)
    return build_corpus(cfg, tmp_path_factory.mktemp("clean_corpus"))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Default corpus plus one ``compare`` run with default settings (the desk-scale training run)."""
    root = tmp_path_factory.mktemp("desk")
    assert main(["gen-corpus", "--out", str(root / "corpus")]) == 0
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(["compare", "--corpus", str(root / "corpus"), "--out", str(root / "compare")])
    assert code == 0
    return {"corpus": root / "corpus", "out": root / "compare", "summary": json.loads(buf.getvalue()),
            "gan_epochs": TrainConfig.epochs}
