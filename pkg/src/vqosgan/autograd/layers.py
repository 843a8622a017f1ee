"""Parameterised layers and a minimal module container."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LayerParams:
    """Weights, bias and hyperparameters of one conv / transpose-conv / dense layer."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kind: str = "conv"

    def __post_init__(self):
        w = self.weight.shape
        if self.kind == "conv":
            expected = (self.out_channels, self.in_channels)
            got = w[:2]
        elif self.kind == "conv_transpose":
            expected = (self.in_channels, self.out_channels)
            got = w[:2]
        elif self.kind == "dense":
            expected = (self.out_channels, self.in_channels)
            got = w
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if tuple(got) != expected:
            raise ValueError(f"{self.kind} weight {w} inconsistent with in={self.in_channels}, "
                             f"out={self.out_channels}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(f"bias {self.bias.shape} != ({self.out_channels},)")


class Module:
    """Container that exposes its parameters in declaration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _init_weight(rng, shape, fan_in, fan_out, init):
    if init == "he":
        return he_uniform(rng, shape, fan_in)
    if init == "xavier":
        return xavier_uniform(rng, shape, fan_in, fan_out)
    raise ValueError(f"unknown init {init!r}")


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, init: str = "he"):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = in_channels * kernel * kernel, out_channels * kernel * kernel
        self.weight = Tensor(_init_weight(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out, init),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride, self.padding = stride, padding
        self.in_channels, self.out_channels = in_channels, out_channels

    @property
    def params(self) -> LayerParams:
        return LayerParams(self.weight, self.bias, self.stride, self.padding, self.in_channels,
                           self.out_channels, "conv")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, init: str = "he"):
        rng = rng if rng is not None else np.random.default_rng(0)
        # each output pixel receives about in*k*k/stride^2 contributions
        fan_in = max(in_channels * kernel * kernel // (stride * stride), 1)
        fan_out = max(out_channels * kernel * kernel // (stride * stride), 1)
        self.weight = Tensor(_init_weight(rng, (in_channels, out_channels, kernel, kernel), fan_in, fan_out, init),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride, self.padding = stride, padding
        self.in_channels, self.out_channels = in_channels, out_channels

    @property
    def params(self) -> LayerParams:
        return LayerParams(self.weight, self.bias, self.stride, self.padding, self.in_channels,
                           self.out_channels, "conv_transpose")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 init: str = "he"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_init_weight(rng, (out_features, in_features), in_features, out_features, init),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        self.in_features, self.out_features = in_features, out_features

    @property
    def params(self) -> LayerParams:
        return LayerParams(self.weight, self.bias, 1, 0, self.in_features, self.out_features, "dense")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)
