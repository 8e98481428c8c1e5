"""Minimal parameter containers: a ``Module`` base that collects named
parameters from attributes, plus dense and feed-forward layers."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameters are ``Tensor`` attributes with ``requires_grad``; children
    are ``Module`` attributes or lists of modules.  Names are dotted paths,
    stable across runs, and used as checkpoint keys."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in sorted(vars(self).items()):
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self._modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item._modules()

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing}")
        for name, p in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {value.shape} != {p.shape}")
            p.data[...] = value


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out)) * scale
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 scale: float = 1.0):
        self.weight = Tensor(xavier(rng, n_in, n_out, scale), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.shift = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gain, self.shift)


def activation(name: str):
    table = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "relu": ad.relu}
    if name not in table:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(table)}")
    return table[name]


class FeedForward(Module):
    """Position-wise two-layer map ``W2 act(W1 x + b1) + b2``."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, act: str = "tanh"):
        self.inner = Linear(width, hidden, rng)
        self.outer = Linear(hidden, width, rng)
        self.act_name = act
        self.act = activation(act)

    def __call__(self, x) -> Tensor:
        return self.outer(self.act(self.inner(x)))
