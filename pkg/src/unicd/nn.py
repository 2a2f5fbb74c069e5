"""Parameter containers and layers on top of the tensor ops."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, ops


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.array(data), requires_grad=requires_grad)


class Noise:
    """Source of dropout / drop-path masks keyed by (seed, step, layer id)."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.step = 0
        self._next_layer = 0

    def register(self) -> int:
        self._next_layer += 1
        return self._next_layer

    def generator(self, layer_id: int) -> np.random.Generator:
        return ops.philox_generator(self.seed, self.step, layer_id)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in getattr(self, "buffers", {}).items():
            yield f"{prefix}{name}", arr
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for k, v in getattr(m, "buffers", {}).items():
                m.buffers[k] = v.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, groups: int = 1, bias: bool = True):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.groups = groups
        fan_in = cin // groups * k * k
        self.weight = Parameter(_kaiming(rng, (cout, cin // groups, k, k), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class Linear(Module):
    """Dense layer over the last axis."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True, scale: float = 1.0):
        self.weight = Parameter(rng.standard_normal((dout, din)) * scale / np.sqrt(din))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ChannelNorm(Module):
    """Layer normalization across the channel axis of an NCHW map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, axis=1, eps=self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.buffers["running_mean"],
                              self.buffers["running_var"], self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p: float, noise: Noise):
        self.p = p
        self.noise = noise
        self.layer_id = noise.register()

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0:
            return x
        return ops.dropout(x, self.p, True, self.noise.generator(self.layer_id))


class DropPath(Module):
    def __init__(self, p: float, noise: Noise):
        if not 0 <= p < 1:
            raise ValueError(f"drop-path rate must be in [0, 1), got {p}")
        self.p = p
        self.noise = noise
        self.layer_id = noise.register()

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0:
            return x
        return ops.drop_path(x, self.p, True, self.noise.generator(self.layer_id))
