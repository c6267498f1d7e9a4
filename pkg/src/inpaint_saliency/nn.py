"""Parameter containers and the standard layers built on :mod:`diffgraph`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import diffgraph as dg
from .diffgraph import Tensor
from .errors import DimensionError


class Module:
    """Registers tensors with ``requires_grad``, numpy buffers and sub-modules
    assigned as attributes, in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> OrderedDict:
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        state.update((n, b.copy()) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict):
        targets = {n: p.data for n, p in self.named_parameters()}
        targets.update(self.named_buffers())
        missing = set(targets) - set(state)
        unexpected = set(state) - set(targets)
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in targets.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {src.shape} != model {arr.shape}")
            arr[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
    return Tensor(w, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, x):
        return dg.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """Batch normalisation; ``frozen`` pins it to running statistics and
    stops its affine parameters from training."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=self.gamma.data.dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=self.gamma.data.dtype))
        self.momentum, self.eps = momentum, eps
        self.frozen = False

    def freeze(self):
        self.frozen = True
        self.gamma.requires_grad = False
        self.beta.requires_grad = False

    def forward(self, x):
        return dg.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training and not self.frozen, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None,
                 zero: bool = False):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if zero:
            self.weight = Tensor(np.zeros((din, dout)), requires_grad=True)
        else:
            self.weight = he_normal(rng, (din, dout), din, gain=1.0)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x):
        return dg.linear(x, self.weight, self.bias)
