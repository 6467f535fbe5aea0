"""Parameter containers and small layers built on :mod:`moee.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes to find trainable tensors; no hooks, no magic."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            yield from _walk(value, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            if own[name].shape != arr.shape:
                raise T.DimensionError(f"{name}: checkpoint shape {arr.shape} != {own[name].shape}")
            own[name].data = np.array(arr, dtype=own[name].dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _walk(value, name: str):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{name}.{k}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
                 zero_init: bool = False, dtype=np.float64):
        w = np.zeros((d_in, d_out), dtype) if zero_init else glorot(rng, d_in, d_out, dtype)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.gain = param(np.ones(dim, dtype))
        self.bias = param(np.zeros(dim, dtype))
        self._eps = eps

    @property
    def eps(self) -> float:
        return self._eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self._eps)


class MLP(Module):
    """Two-layer perceptron with a configurable hidden activation."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int,
                 activation: str = "silu", zero_init_out: bool = False, dtype=np.float64):
        self.fc1 = Linear(rng, d_in, d_hidden, dtype=dtype)
        self.fc2 = Linear(rng, d_hidden, d_out, zero_init=zero_init_out, dtype=dtype)
        self._act = {"silu": T.silu, "tanh": T.tanh, "relu": T.relu}[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self._act(self.fc1(x)))
