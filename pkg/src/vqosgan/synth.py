"""Synthetic source videos.

Each video has a static smooth background (a linear ramp) and one moving
motif. Motion is integer-pixel per frame and reflects off the borders, so
consecutive frames differ only where the motif moved.
"""

from __future__ import annotations

import numpy as np

MOTIFS = ("moving-rectangle", "moving-disc", "gradient-noise", "checker-drift")


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * x / max(w - 1, 1) + np.sin(angle) * y / max(h - 1, 1))
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    lo = rng.uniform(0.05, 0.35)
    hi = rng.uniform(0.65, 0.95)
    return lo + (hi - lo) * ramp


def _velocity(rng: np.random.Generator, vmax: int = 2) -> tuple[int, int]:
    while True:
        v = tuple(int(x) for x in rng.integers(-vmax, vmax + 1, size=2))
        if v != (0, 0):
            return v


def _bounce(pos: int, vel: int, lo: int, hi: int) -> tuple[int, int]:
    nxt = pos + vel
    if nxt < lo or nxt > hi:
        vel = -vel
        nxt = pos + vel
    return min(max(nxt, lo), hi), vel


def _contrast(rng: np.random.Generator, bg_mean: float) -> float:
    return float(rng.uniform(0.0, 0.15) if bg_mean > 0.5 else rng.uniform(0.85, 1.0))


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(0, 1, size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def gen_video(seed: int, n_frames: int, size: tuple[int, int] = (64, 64), motif: str = "moving-rectangle",
              motion: dict | None = None) -> list[np.ndarray]:
    """Return ``n_frames`` HxW frames in [0, 1], deterministic in ``seed``.

    ``motion``, when given, is filled with the drawn motif parameters
    (size, velocity) for callers that need to reason about frame deltas.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if motif not in MOTIFS:
        raise ValueError(f"unknown motif {motif!r}; choose from {MOTIFS}")
    h, w = size
    rng = np.random.default_rng(seed)
    bg = _background(rng, h, w)
    frames: list[np.ndarray] = []
    info = motion if motion is not None else {}

    if motif in ("moving-rectangle", "moving-disc"):
        if motif == "moving-rectangle":
            rh = int(rng.integers(max(2, h // 6), max(3, h // 2.5)))
            rw = int(rng.integers(max(2, w // 6), max(3, w // 2.5)))
        else:
            r = int(rng.integers(max(2, min(h, w) // 10), max(3, min(h, w) // 4)))
            rh = rw = 2 * r + 1
        value = _contrast(rng, float(bg.mean()))
        vy, vx = _velocity(rng)
        py = int(rng.integers(0, h - rh + 1))
        px = int(rng.integers(0, w - rw + 1))
        info.update(height=rh, width=rw, velocity=(vy, vx), value=value)
        if motif == "moving-disc":
            yy, xx = np.mgrid[0:rh, 0:rw]
            c = (rh - 1) / 2
            dist = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
            alpha = np.clip(c + 0.5 - dist, 0.0, 1.0)
        else:
            alpha = np.ones((rh, rw))
        for _ in range(n_frames):
            f = bg.copy()
            patch = f[py:py + rh, px:px + rw]
            f[py:py + rh, px:px + rw] = patch * (1 - alpha) + value * alpha
            frames.append(f)
            py, vy = _bounce(py, vy, 0, h - rh)
            px, vx = _bounce(px, vx, 0, w - rw)
        return frames

    vy, vx = _velocity(rng)
    info.update(velocity=(vy, vx))
    span = 2 * n_frames + 2
    if motif == "gradient-noise":
        cell = int(rng.integers(8, 17))
        field = _value_noise(rng, h + 2 * span, w + 2 * span, cell)
        amp = rng.uniform(0.35, 0.6)
        for t in range(n_frames):
            oy, ox = span + vy * t, span + vx * t
            f = 0.5 * bg + amp * (field[oy:oy + h, ox:ox + w] - 0.5) + 0.25
            frames.append(np.clip(f, 0.0, 1.0))
        return frames

    # checker-drift
    square = int(rng.integers(6, 13))
    lo_v, hi_v = sorted(rng.uniform(0.1, 0.9, size=2))
    if hi_v - lo_v < 0.3:
        lo_v, hi_v = 0.2, 0.8
    y, x = np.mgrid[0:h, 0:w]
    for t in range(n_frames):
        cells = ((y + vy * t) // square + (x + vx * t) // square) % 2
        f = 0.5 * bg + 0.5 * np.where(cells == 1, hi_v, lo_v)
        frames.append(np.clip(f, 0.0, 1.0))
    return frames
