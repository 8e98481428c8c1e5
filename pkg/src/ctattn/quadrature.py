"""Quadrature rules on [-1, 1]: Gauss-Legendre with 2..5 nodes, and the
two-point trapezoid ("linear") rule."""
from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

SUPPORTED_GAUSS = (2, 3, 4, 5)


def _gauss_table(p: int) -> tuple[list[float], list[float]]:
    if p == 2:
        a = 1.0 / sqrt(3.0)
        return [-a, a], [1.0, 1.0]
    if p == 3:
        a = sqrt(3.0 / 5.0)
        return [-a, 0.0, a], [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0]
    if p == 4:
        inner = sqrt(3.0 / 7.0 - 2.0 / 7.0 * sqrt(6.0 / 5.0))
        outer = sqrt(3.0 / 7.0 + 2.0 / 7.0 * sqrt(6.0 / 5.0))
        w_in = (18.0 + sqrt(30.0)) / 36.0
        w_out = (18.0 - sqrt(30.0)) / 36.0
        return [-outer, -inner, inner, outer], [w_out, w_in, w_in, w_out]
    if p == 5:
        inner = sqrt(5.0 - 2.0 * sqrt(10.0 / 7.0)) / 3.0
        outer = sqrt(5.0 + 2.0 * sqrt(10.0 / 7.0)) / 3.0
        w_in = (322.0 + 13.0 * sqrt(70.0)) / 900.0
        w_out = (322.0 - 13.0 * sqrt(70.0)) / 900.0
        return ([-outer, -inner, 0.0, inner, outer],
                [w_out, w_in, 128.0 / 225.0, w_in, w_out])
    raise ValueError(f"Gauss-Legendre rule supports P in {SUPPORTED_GAUSS}, got {p}")


@dataclass(frozen=True)
class QuadratureRule:
    kind: str
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def spec(self) -> str:
        return "linear" if self.kind == "linear" else f"gauss:{self.size}"

    def integrate(self, samples):
        """``sum_p weights[p] * samples[p]`` over the leading axis."""
        return integrate(self, samples)


def make_rule(kind: str = "linear", p: int | None = None) -> QuadratureRule:
    if kind == "linear":
        nodes, weights = [-1.0, 1.0], [1.0, 1.0]
    elif kind == "gauss":
        if p is None:
            raise ValueError("Gauss-Legendre rule needs a node count")
        nodes, weights = _gauss_table(int(p))
    else:
        raise ValueError(f"unknown quadrature kind {kind!r} (expected 'linear' or 'gauss')")
    nodes = np.array(nodes)
    weights = np.array(weights)
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return QuadratureRule(kind, nodes, weights)


def parse_rule(spec: str) -> QuadratureRule:
    """Parse ``"linear"`` or ``"gauss:P"``."""
    spec = spec.strip().lower()
    if spec == "linear":
        return make_rule("linear")
    if spec.startswith("gauss"):
        _, _, count = spec.partition(":")
        if not count.isdigit():
            raise ValueError(f"quadrature spec {spec!r} must look like 'gauss:P'")
        return make_rule("gauss", int(count))
    raise ValueError(f"quadrature spec {spec!r} must be 'linear' or 'gauss:P'")


def integrate(rule: QuadratureRule, samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] != rule.size:
        raise ValueError(f"expected {rule.size} samples (one per node), got {samples.shape[0]}")
    return np.tensordot(rule.weights, samples, axes=(0, 0))
