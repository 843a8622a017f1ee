"""Generator, discriminator and the paired-input baseline network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Conv2d, ConvTranspose2d, Dense, Module, Tensor, ops
from .emulator import NetworkState, format_class
from .errors import DataError


INPUT_GAIN = 4.0


class LabelError(DataError):
    pass


@dataclass(frozen=True)
class ClassSets:
    """Configured label values, each kept in ascending numeric order."""

    rates: tuple[float, ...]
    losses: tuple[float, ...]

    def __post_init__(self):
        r = tuple(sorted(float(x) for x in self.rates))
        ls = tuple(sorted(float(x) for x in self.losses))
        if not r or not ls:
            raise LabelError("class sets must be non-empty")
        if len(set(r)) != len(r) or len(set(ls)) != len(ls):
            raise LabelError("class sets must not repeat values")
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "losses", ls)

    @property
    def n_rate(self) -> int:
        return len(self.rates)

    @property
    def n_loss(self) -> int:
        return len(self.losses)

    @property
    def conditions(self) -> list[NetworkState]:
        return [NetworkState(r, l) for r in self.rates for l in self.losses]

    def rate_index(self, rate: float) -> int:
        try:
            return self.rates.index(float(rate))
        except ValueError:
            raise LabelError(f"data rate {rate} not in configured classes {self.rates}") from None

    def loss_index(self, loss: float) -> int:
        try:
            return self.losses.index(float(loss))
        except ValueError:
            raise LabelError(f"packet loss {loss} not in configured classes {self.losses}") from None

    def indices(self, state: NetworkState) -> tuple[int, int]:
        return self.rate_index(state.data_rate), self.loss_index(state.packet_loss)

    def state(self, rate_idx: int, loss_idx: int) -> NetworkState:
        return NetworkState(self.rates[int(rate_idx)], self.losses[int(loss_idx)])

    def joint_index(self, rate_idx, loss_idx):
        return np.asarray(rate_idx) * self.n_loss + np.asarray(loss_idx)

    def label_planes(self, rate_idx: Sequence[int], loss_idx: Sequence[int], height: int, width: int) -> np.ndarray:
        """One-hot label planes ``(N, n_rate + n_loss, H, W)`` broadcast over the frame."""
        r = np.asarray(rate_idx, dtype=np.int64).reshape(-1)
        lo = np.asarray(loss_idx, dtype=np.int64).reshape(-1)
        if r.size != lo.size:
            raise LabelError("rate and loss label batches differ in length")
        if r.size and (r.min() < 0 or r.max() >= self.n_rate or lo.min() < 0 or lo.max() >= self.n_loss):
            raise LabelError("label index outside configured classes")
        onehot = np.zeros((r.size, self.n_rate + self.n_loss))
        onehot[np.arange(r.size), r] = 1.0
        onehot[np.arange(r.size), self.n_rate + lo] = 1.0
        return np.broadcast_to(onehot[:, :, None, None], (r.size, onehot.shape[1], height, width)).copy()

    def to_dict(self) -> dict:
        return {"rates": list(self.rates), "losses": list(self.losses)}

    @classmethod
    def from_dict(cls, d) -> "ClassSets":
        return cls(tuple(d["rates"]), tuple(d["losses"]))

    def describe(self) -> str:
        return (f"rates {{{', '.join(format_class(r) for r in self.rates)}}} kbps x "
                f"losses {{{', '.join(format_class(x) for x in self.losses)}}} %")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _logit(x: np.ndarray, eps: float = 0.02) -> np.ndarray:
    p = np.clip(x, eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def _check_frames(x: Tensor, shape: tuple[int, int, int], what: str) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(shape):
        raise ValueError(f"{what}: expected frames (N, {shape[0]}, {shape[1]}, {shape[2]}), got {x.shape}")


class Generator(Module):
    """Conditional encoder/decoder.

    Three stride-2 convolutions take the degraded frame concatenated with the
    one-hot label planes down to a latent vector; a dense projection and three
    stride-2 transposed convolutions bring it back to frame size; a sigmoid
    keeps pixels in [0, 1].

    With ``residual=True`` the logit of the (clipped) input frame is added
    before the sigmoid, so the decoder learns a correction to the received
    frame rather than the whole image. Concealed mid-gray blocks have logit 0
    and are filled entirely by the decoder.

    With ``skips=True`` the first two encoder feature maps are concatenated
    onto the decoder input at matching resolution, giving the decoder the
    local context it needs to fill small concealed blocks.
    """

    def __init__(self, frame_shape: tuple[int, int, int], classes: ClassSets, latent_dim: int = 256,
                 channels: Sequence[int] = (16, 32, 64), seed: int = 0, residual: bool = False,
                 skips: bool = False):
        c, h, w = frame_shape
        if h % 8 or w % 8:
            raise ValueError(f"frame size {h}x{w} must be divisible by 8")
        if len(channels) != 3:
            raise ValueError("generator takes exactly three encoder widths")
        rng = np.random.default_rng(seed)
        self.frame_shape = (c, h, w)
        self.classes = classes
        self.latent_dim = latent_dim
        self.channels = tuple(channels)
        self.residual = residual
        self.skips = skips
        c0, c1, c2 = channels
        widen = 2 if skips else 1
        self.enc1 = Conv2d(c + classes.n_rate + classes.n_loss, c0, 4, 2, 1, rng)
        self.enc2 = Conv2d(c0, c1, 4, 2, 1, rng)
        self.enc3 = Conv2d(c1, c2, 4, 2, 1, rng)
        self._bottom = (c2, h // 8, w // 8)
        flat = c2 * (h // 8) * (w // 8)
        self.to_latent = Dense(flat, latent_dim, rng, init="xavier")
        self.from_latent = Dense(latent_dim, flat, rng)
        self.dec1 = ConvTranspose2d(c2, c1, 4, 2, 1, rng)
        self.dec2 = ConvTranspose2d(c1 * widen, c0, 4, 2, 1, rng)
        self.dec3 = ConvTranspose2d(c0 * widen, c, 4, 2, 1, rng, init="xavier")

    def condition(self, frames, rate_idx, loss_idx, planes: Tensor | None = None) -> Tensor:
        x = _as_tensor(frames)
        _check_frames(x, self.frame_shape, "generator")
        if planes is None:
            planes = Tensor(self.classes.label_planes(rate_idx, loss_idx, *self.frame_shape[1:]))
        if planes.shape[0] != x.shape[0]:
            raise LabelError(f"{planes.shape[0]} labels for {x.shape[0]} frames")
        return ops.concat([x, planes], axis=1)

    def _encoder(self, conditioned: Tensor) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        h1 = ops.relu(self.enc1(conditioned))
        h2 = ops.relu(self.enc2(h1))
        h3 = ops.relu(self.enc3(h2))
        return self.to_latent(ops.flatten(h3)), (h1, h2)

    def encode(self, conditioned: Tensor) -> Tensor:
        """Latent vector of length ``latent_dim`` per frame."""
        return self._encoder(conditioned)[0]

    def decode(self, latent: Tensor, skip: np.ndarray | None = None,
               features: tuple[Tensor, Tensor] | None = None) -> Tensor:
        if self.skips and features is None:
            raise ValueError("a generator built with skips needs the encoder features to decode")
        h = ops.relu(self.from_latent(latent))
        h = ops.reshape(h, (latent.shape[0], *self._bottom))
        h = ops.relu(self.dec1(h))
        if self.skips:
            h = ops.concat([h, features[1]], axis=1)
        h = ops.relu(self.dec2(h))
        if self.skips:
            h = ops.concat([h, features[0]], axis=1)
        h = self.dec3(h)
        if skip is not None:
            h = h + Tensor(skip)
        return ops.sigmoid(h)

    def __call__(self, frames, rate_idx=None, loss_idx=None, planes: Tensor | None = None) -> Tensor:
        x = _as_tensor(frames)
        latent, features = self._encoder(self.condition(x, rate_idx, loss_idx, planes))
        skip = _logit(x.data) if self.residual else None
        return self.decode(latent, skip, features)

    def architecture(self) -> dict:
        return {"kind": "generator", "frame_shape": list(self.frame_shape), "latent_dim": self.latent_dim,
                "channels": list(self.channels), "residual": self.residual, "skips": self.skips}


class _ConvTrunk(Module):
    """Four convolutions with leaky ReLU, then a flatten or a global average pool.

    Average pooling turns the feature maps into frame-wide statistics (how
    many blocks look concealed, how coarse the quantisation is), which is
    what the network-state heads need regardless of where the damage falls.
    """

    def __init__(self, in_channels: int, frame_hw: tuple[int, int], channels: Sequence[int],
                 rng: np.random.Generator, alpha: float = 0.2, pool: str = "mean",
                 strides: Sequence[int] = (2, 2, 2, 2), kernels: Sequence[int] = (2, 4, 4, 4)):
        h, w = frame_hw
        if len(channels) != 4 or len(strides) != 4 or len(kernels) != 4:
            raise ValueError("trunk takes exactly four conv widths, strides and kernels")
        if pool not in ("mean", "flatten"):
            raise ValueError(f"pool must be 'mean' or 'flatten', got {pool!r}")
        down = int(np.prod(strides))
        if h % down or w % down:
            raise ValueError(f"frame size {h}x{w} must be divisible by {down}")
        widths = (in_channels, *channels)
        # padding (k - s + 1) // 2 divides the size exactly by the stride for k2/s2, k4/s2 and k3/s1;
        # a 2x2/stride-2 first layer lines up with the codec's 2x2 blocks
        self.convs = [Conv2d(a, b, k, s, (k - s + 1) // 2, rng)
                      for a, b, s, k in zip(widths, widths[1:], strides, kernels)]
        self.alpha = alpha
        self.pool = pool
        self.strides = tuple(strides)
        self.kernels = tuple(kernels)
        self.out_features = channels[-1] if pool == "mean" else channels[-1] * (h // down) * (w // down)

    def __call__(self, x: Tensor) -> Tensor:
        # centre pixels on mid-gray and stretch so small quantisation steps register at init
        x = (x - 0.5) * INPUT_GAIN
        for conv in self.convs:
            x = ops.leaky_relu(conv(x), self.alpha)
        return ops.spatial_mean(x) if self.pool == "mean" else ops.flatten(x)


class Discriminator(Module):
    """Conv trunk with three dense heads: rate logits, loss logits, validity."""

    def __init__(self, frame_shape: tuple[int, int, int], classes: ClassSets,
                 channels: Sequence[int] = (16, 32, 64, 64), seed: int = 1, pool: str = "mean",
                 strides: Sequence[int] = (2, 2, 2, 2), kernels: Sequence[int] = (2, 4, 4, 4)):
        c, h, w = frame_shape
        rng = np.random.default_rng(seed)
        self.frame_shape = (c, h, w)
        self.classes = classes
        self.channels = tuple(channels)
        self.trunk = _ConvTrunk(c, (h, w), channels, rng, pool=pool, strides=strides, kernels=kernels)
        f = self.trunk.out_features
        self.rate_head = Dense(f, classes.n_rate, rng, init="xavier")
        self.loss_head = Dense(f, classes.n_loss, rng, init="xavier")
        self.valid_head = Dense(f, 1, rng, init="xavier")

    def __call__(self, frames) -> tuple[Tensor, Tensor, Tensor]:
        x = _as_tensor(frames)
        _check_frames(x, self.frame_shape, "discriminator")
        feats = self.trunk(x)
        return self.rate_head(feats), self.loss_head(feats), ops.sigmoid(self.valid_head(feats))

    def architecture(self) -> dict:
        return {"kind": "discriminator", "frame_shape": list(self.frame_shape), "channels": list(self.channels),
                "pool": self.trunk.pool, "strides": list(self.trunk.strides), "kernels": list(self.trunk.kernels)}


class PairedCNN(Module):
    """Baseline that sees the original and received frames stacked as channels."""

    def __init__(self, frame_shape: tuple[int, int, int], classes: ClassSets,
                 channels: Sequence[int] = (16, 32, 64, 64), seed: int = 2, pool: str = "mean",
                 strides: Sequence[int] = (2, 2, 2, 2), kernels: Sequence[int] = (2, 4, 4, 4)):
        c, h, w = frame_shape
        rng = np.random.default_rng(seed)
        self.frame_shape = (c, h, w)
        self.classes = classes
        self.channels = tuple(channels)
        self.trunk = _ConvTrunk(2 * c, (h, w), channels, rng, pool=pool, strides=strides, kernels=kernels)
        f = self.trunk.out_features
        self.rate_head = Dense(f, classes.n_rate, rng, init="xavier")
        self.loss_head = Dense(f, classes.n_loss, rng, init="xavier")

    def __call__(self, original, received) -> tuple[Tensor, Tensor]:
        o, r = _as_tensor(original), _as_tensor(received)
        if o.shape != r.shape:
            raise ValueError(f"paired inputs differ in shape: {o.shape} vs {r.shape}")
        _check_frames(o, self.frame_shape, "paired cnn")
        feats = self.trunk(ops.concat([o, r], axis=1))
        return self.rate_head(feats), self.loss_head(feats)

    def architecture(self) -> dict:
        return {"kind": "paired_cnn", "frame_shape": list(self.frame_shape), "channels": list(self.channels),
                "pool": self.trunk.pool, "strides": list(self.trunk.strides), "kernels": list(self.trunk.kernels)}
