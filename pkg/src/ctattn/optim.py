"""First-order optimisers over named parameter tensors."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def _check(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    for name in params:
        if name not in grads:
            raise KeyError(f"no gradient supplied for parameter {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * factor
    return total


class SGD:
    def __init__(self, lr: float = 1e-2):
        self.lr = lr

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        _check(params, grads)
        for name, p in params.items():
            p.data -= self.lr * grads[name]

    def state_dict(self) -> dict:
        return {"kind": "sgd", "lr": self.lr}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]


class Adam:
    """Adam with bias correction; moment buffers are keyed by parameter name."""

    def __init__(self, lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        _check(params, grads)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "t": self.t,
                "betas": [self.beta1, self.beta2], "eps": self.eps,
                "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.t = int(state["t"])
        self.beta1, self.beta2 = state["betas"]
        self.eps = state["eps"]
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
