"""Parameter containers and the small MLP building blocks shared by encoder and decoder."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Module:
    """Minimal module tree: parameters and sub-modules are discovered from attributes."""

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            for item in value if isinstance(value, (list, tuple)) else [value]:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, dtype=None):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in, n_out)), dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, n_out), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5, dtype=None):
        self.gain = Parameter(np.ones(n), dtype=dtype)
        self.bias = Parameter(np.zeros(n), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Linear -> LayerNorm -> ReLU -> Linear.

    With ``residual=True`` the input is added to the output of the last layer,
    through a bias-free linear projection when the widths differ.
    """

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator,
                 residual: bool = False, dtype=None):
        self.fc1 = Linear(n_in, n_hidden, rng, dtype=dtype)
        self.norm = LayerNorm(n_hidden, dtype=dtype)
        self.fc2 = Linear(n_hidden, n_out, rng, dtype=dtype)
        self.skip = None
        self.residual = residual
        if residual and n_in != n_out:
            self.skip = Linear(n_in, n_out, rng, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.fc2(T.relu(self.norm(self.fc1(x))))
        if self.residual:
            y = y + (self.skip(x) if self.skip is not None else x)
        return y
