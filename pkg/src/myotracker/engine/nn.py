"""Parameter containers built on the tensor engine.

A ``Module`` is a plain object whose attributes may be parameters
(``Tensor`` with ``requires_grad``), sub-modules, or lists of sub-modules.
``named_parameters`` walks that structure and yields stable dotted names,
which double as the keys of the on-disk weight store.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(
        rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True
    )


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init=False):
        if zero_init:
            self.weight = Tensor(np.zeros((d_out, d_in), np.float32), requires_grad=True)
        else:
            self.weight = uniform_fan_in(rng, (d_out, d_in), d_in)
        self.bias = Tensor(np.zeros(d_out, np.float32), requires_grad=True)

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1):
        self.stride = stride
        self.padding = (k - 1) // 2
        fan_in = c_in * k * k
        self.weight = uniform_fan_in(rng, (c_out, c_in, k, k), fan_in)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(d, np.float32), requires_grad=True)
        self.offset = Tensor(np.zeros(d, np.float32), requires_grad=True)

    def forward(self, x):
        return ops.layer_norm(x, self.gain, self.offset, eps=self.eps)


class GroupNorm(Module):
    def __init__(self, channels, groups=8, eps=1e-5):
        if channels % groups:
            groups = 1
        self.groups = groups
        self.eps = eps
        self.gain = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.offset = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def forward(self, x):
        return ops.group_norm(x, self.gain, self.offset, self.groups, eps=self.eps)


class InstanceNorm(Module):
    """Per-channel spatial normalization for channels-last feature maps."""

    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.offset = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def forward(self, x):
        return ops.instance_norm_nhwc(x, self.gain, self.offset, eps=self.eps)
