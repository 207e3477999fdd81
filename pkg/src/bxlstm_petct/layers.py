"""Parameter containers and the conv building blocks of the U-Net."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, conv3d, conv_transpose3d, instance_norm, leaky_relu, trilinear_upsample


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    t = Tensor(w.astype(dtype), requires_grad=True)
    t._fan_in = fan_in
    return t


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Holds parameters and child modules as attributes; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv(Module):
    def __init__(self, rng, cin, cout, kernel=3, stride=1, bias=True):
        k = kernel
        self.weight = he_normal(rng, (cout, cin, k, k, k), cin * k**3)
        if bias:
            self.bias = zeros((cout,))
        self._stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        y = conv3d(x, self.weight, stride=self._stride)
        if hasattr(self, "bias"):
            y = y + self.bias
        return y


class Norm(Module):
    def __init__(self, channels):
        self.scale = ones((channels,))
        self.shift = zeros((channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.scale, self.shift)


class ConvNormAct(Module):
    # no conv bias: the instance norm's mean subtraction cancels it exactly
    def __init__(self, rng, cin, cout, stride=1, alpha=0.01):
        self.conv = Conv(rng, cin, cout, 3, stride, bias=False)
        self.norm = Norm(cout)
        self._alpha = alpha

    def __call__(self, x):
        return leaky_relu(self.norm(self.conv(x)), self._alpha)


class ResBlock(Module):
    """conv-norm-act, conv-norm, add skip, act."""

    def __init__(self, rng, channels, alpha=0.01):
        self.conv1 = Conv(rng, channels, channels, bias=False)
        self.norm1 = Norm(channels)
        self.conv2 = Conv(rng, channels, channels, bias=False)
        self.norm2 = Norm(channels)
        self._alpha = alpha

    def __call__(self, x):
        y = leaky_relu(self.norm1(self.conv1(x)), self._alpha)
        y = self.norm2(self.conv2(y))
        return leaky_relu(x + y, self._alpha)


class Upsample(Module):
    """Doubles spatial dims: stride-2 transposed conv, or trilinear + 1x1x1 conv."""

    def __init__(self, rng, cin, cout, mode="transposed"):
        self._mode = mode
        if mode == "transposed":
            self.weight = he_normal(rng, (cin, cout, 2, 2, 2), cin)
        elif mode == "trilinear":
            self.proj = Conv(rng, cin, cout, kernel=1)
        else:
            raise ValueError(f"unknown upsample mode {mode!r}")

    def __call__(self, x):
        if self._mode == "transposed":
            return conv_transpose3d(x, self.weight)
        return self.proj(trilinear_upsample(x))
