"""Parameterised layers built on :mod:`rdafnet.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Container that discovers parameters and submodules from its attributes.

    Insertion order of attributes fixes parameter naming and order, which is
    what checkpoints and the optimizer rely on.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_(self) -> Module:
        for p in self.parameters():
            p.data[...] = 0
        return self

    def flops(self, h: int, w: int) -> tuple[int, int, int, int]:
        """Return (multiply-accumulates, elementwise ops, out_h, out_w) for an ``h`` x ``w`` input."""
        raise NotImplementedError


def _param(shape, dtype, name: str) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def _fan_in_uniform(p: Tensor, fan_in: int, rng: np.random.Generator | None) -> None:
    if rng is None:
        return
    bound = 1.0 / np.sqrt(fan_in)
    p.data[...] = rng.uniform(-bound, bound, size=p.shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32, zero_init: bool = False):
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = _param((cout, cin, kernel, kernel), dtype, "weight")
        self.bias = _param((cout,), dtype, "bias")
        if not zero_init:
            fan_in = cin * kernel * kernel
            _fan_in_uniform(self.weight, fan_in, rng)
            _fan_in_uniform(self.bias, fan_in, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def flops(self, h, w):
        ho, wo = self.out_size(h, w)
        return self.cin * self.cout * self.kernel ** 2 * ho * wo, 0, ho, wo


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 4, stride: int = 2, padding: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.cin, self.cout, self.kernel, self.stride, self.padding = cin, cout, kernel, stride, padding
        self.weight = _param((cin, cout, kernel, kernel), dtype, "weight")
        self.bias = _param((cout,), dtype, "bias")
        # each output sees roughly cin * (kernel/stride)^2 inputs
        fan_in = max(1, cin * (kernel // stride) ** 2)
        _fan_in_uniform(self.weight, fan_in, rng)
        _fan_in_uniform(self.bias, fan_in, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def flops(self, h, w):
        ho = (h - 1) * self.stride - 2 * self.padding + self.kernel
        wo = (w - 1) * self.stride - 2 * self.padding + self.kernel
        return self.cin * self.cout * self.kernel ** 2 * h * w, 0, ho, wo


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, rng: np.random.Generator | None = None, dtype=np.float32):
        self.channels = channels
        self.weight = _param((channels, 1, 3, 3), dtype, "weight")
        self.bias = _param((channels,), dtype, "bias")
        _fan_in_uniform(self.weight, 9, rng)
        _fan_in_uniform(self.bias, 9, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.bias)

    def flops(self, h, w):
        return self.channels * 9 * h * w, 0, h, w
