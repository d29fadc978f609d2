"""Parameter containers shared by the network heads."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Layer:
    """Base class: parameters are ``Tensor`` attributes, children are ``Layer`` attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv(Layer):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, zero: bool = False,
                 gain: float = 1.0):
        shape = (cout, cin, k, k)
        w = np.zeros(shape) if zero else gain * he_normal(rng, shape, cin * k * k)
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(cout))
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1, pad=self.pad)


class Dense(Layer):
    def __init__(self, nin: int, nout: int, rng: np.random.Generator, zero: bool = False,
                 gain: float = 1.0):
        w = np.zeros((nout, nin)) if zero else gain * he_normal(rng, (nout, nin), nin)
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(nout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)
