"""Parameter containers and the basic layers the network is assembled from."""

from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

_SCOPE: list[str] = []


def current_scope() -> str:
    return ".".join(_SCOPE)


@contextlib.contextmanager
def scope(name: str):
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated at two standard deviations (redrawn, not clipped)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=True)


class Module:
    """Minimal module tree: parameters, buffers, train/eval flag and named scopes."""

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        with scope(getattr(self, "_scope_name", type(self).__name__)):
            return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]
        for name, buf in buffers.items():
            buf[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=None, groups=1, bias=True):
        super().__init__()
        if padding is None:
            padding = k // 2
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = cin // groups * k * k
        self.weight = param(kaiming_normal(rng, (cout, cin // groups, k, k), fan_in))
        self.bias = param(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    """Token projection; weight stored as (in, out)."""

    def __init__(self, rng, din, dout, bias=True, std=0.02):
        super().__init__()
        self.weight = param(trunc_normal(rng, (din, dout), std))
        self.bias = param(np.zeros(dout)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels, axis=-1, eps=1e-6):
        super().__init__()
        self.axis, self.eps = axis, eps
        self.weight = param(np.ones(channels))
        self.bias = param(np.zeros(channels))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.axis, self.eps)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = param(np.ones(channels))
        self.bias = param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=T.get_default_dtype())
        self.running_var = np.ones(channels, dtype=T.get_default_dtype())

    def forward(self, x):
        return T.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class ConvBN(Module):
    """Bias-free conv, batch norm, optional ReLU."""

    def __init__(self, rng, cin, cout, k, stride=1, act=True, groups=1):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, k, stride=stride, groups=groups, bias=False)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x):
        x = self.bn(self.conv(x))
        return T.relu(x) if self.act else x


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self):
        return len(self.layers)
