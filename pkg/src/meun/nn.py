"""Small module system: parameter ownership, naming, train/eval mode."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from meun.autodiff import ops
from meun.autodiff.tensor import Parameter, Tensor


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, dilation=1, bias=True, *, rng, dtype=np.float32):
        self.weight = Parameter(_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.dilation)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c, *, dtype=np.float32):
        self.weight = Parameter(np.ones(c, dtype=dtype))
        self.bias = Parameter(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)


class ConvBNReLU(Module):
    """3x3 (or kxk) convolution without bias, batch norm, ReLU."""

    def __init__(self, cin, cout, k=3, dilation=1, *, rng, dtype=np.float32):
        self.conv = Conv2d(cin, cout, k, dilation, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class Conv2(Module):
    """Two stacked 3x3 ConvBNReLU units; the basic convolution block of the network."""

    def __init__(self, cin, cout, *, rng, dtype=np.float32):
        self.c1 = ConvBNReLU(cin, cout, rng=rng, dtype=dtype)
        self.c2 = ConvBNReLU(cout, cout, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.c2(self.c1(x))


class Linear(Module):
    def __init__(self, fin, fout, *, rng, dtype=np.float32):
        self.weight = Parameter(_uniform(rng, (fout, fin), fin, dtype))
        self.bias = Parameter(np.zeros(fout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


def set_dtype(module: Module, dtype) -> None:
    for p in module.parameters():
        p.astype(dtype)
    for m in module.modules():
        for name in getattr(m, "_buffers", ()):
            setattr(m, name, getattr(m, name).astype(dtype))
