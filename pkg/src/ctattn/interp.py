"""Closed-form interpolants through irregularly spaced knots.

Both kinds are linear maps of the knot values, so evaluation at a set of
query times is a matrix ``B`` with ``interp(t) = B @ values``.  The model
builds ``B`` once from the (constant) time stamps and multiplies it with the
value tensor, which is how gradients reach the knot values.

Outside ``[t_1, t_N]`` the interpolant continues along the end tangent.
For the natural cubic spline this keeps the extension C^2, since the
second derivative is already zero at both ends.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, matmul

KINDS = ("cubic", "linear")


def _check_knots(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1:
        raise ValueError(f"knot times must be 1-D, got shape {times.shape}")
    if len(times) < 2:
        raise ValueError(f"need at least 2 knots, got {len(times)}")
    if not np.all(np.diff(times) > 0):
        raise ValueError("knot times must be strictly increasing (no duplicates)")
    return times


def second_derivative_operator(times: np.ndarray) -> np.ndarray:
    """Matrix ``G`` mapping knot values to natural-spline second derivatives.

    Solves the tridiagonal continuity system (Thomas algorithm) for every
    column of the right-hand-side operator at once.
    """
    x = _check_knots(times)
    n = len(x)
    G = np.zeros((n, n))
    if n == 2:
        return G
    h = np.diff(x)
    m = n - 2
    # right-hand side operator R: (n-2) x n, row k -> 6 * (slope_{k+1} - slope_k)
    R = np.zeros((m, n))
    rows = np.arange(m)
    R[rows, rows] = 6.0 / h[:-1]
    R[rows, rows + 1] = -6.0 / h[:-1] - 6.0 / h[1:]
    R[rows, rows + 2] = 6.0 / h[1:]
    diag = 2.0 * (h[:-1] + h[1:])
    sub = h[1:-1]   # coupling between interior unknowns k and k+1
    c = np.zeros(m)
    d = np.zeros((m, n))
    c_prev, d_prev = 0.0, np.zeros(n)
    for k in range(m):
        lower = sub[k - 1] if k > 0 else 0.0
        denom = diag[k] - lower * c_prev
        c[k] = (sub[k] / denom) if k < m - 1 else 0.0
        d[k] = (R[k] - lower * d_prev) / denom
        c_prev, d_prev = c[k], d[k]
    sol = np.zeros((m, n))
    sol[-1] = d[-1]
    for k in range(m - 2, -1, -1):
        sol[k] = d[k] - c[k] * sol[k + 1]
    G[1:-1] = sol
    return G


def basis_matrix(times, query, kind: str = "cubic") -> np.ndarray:
    """Weights ``W`` of shape ``query.shape + (N,)`` with ``interp(query) = W @ values``."""
    if kind not in KINDS:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    x = _check_knots(times)
    n = len(x)
    q = np.asarray(query, dtype=np.float64)
    flat = q.reshape(-1)
    G = second_derivative_operator(x) if kind == "cubic" else np.zeros((n, n))
    h = np.diff(x)

    k = np.clip(np.searchsorted(x, flat, side="right") - 1, 0, n - 2)
    hk = h[k]
    # inside [t_1, t_N] the formula below is exact; outside, t is clamped and
    # the tangent term added afterwards
    tc = np.clip(flat, x[0], x[-1])
    A = (x[k + 1] - tc) / hk
    B = 1.0 - A
    W = np.zeros((flat.size, n))
    idx = np.arange(flat.size)
    W[idx, k] += A
    W[idx, k + 1] += B
    coef = hk * hk / 6.0
    W += ((A ** 3 - A) * coef)[:, None] * G[k] + ((B ** 3 - B) * coef)[:, None] * G[k + 1]

    left = flat < x[0]
    right = flat > x[-1]
    if left.any():
        d0 = np.zeros(n)
        d0[0], d0[1] = -1.0 / h[0], 1.0 / h[0]
        d0 -= h[0] * (2.0 * G[0] + G[1]) / 6.0
        W[left] += (flat[left] - x[0])[:, None] * d0
    if right.any():
        d1 = np.zeros(n)
        d1[-2], d1[-1] = -1.0 / h[-1], 1.0 / h[-1]
        d1 += h[-1] * (G[-2] + 2.0 * G[-1]) / 6.0
        W[right] += (flat[right] - x[-1])[:, None] * d1
    return W.reshape(q.shape + (n,))


def batched_basis(times, lengths, query, kind: str = "cubic") -> np.ndarray:
    """Per-sequence basis for padded batches.

    ``times``: (B, N) with the first ``lengths[b]`` entries valid.
    ``query``: (B, ...).  Returns (B, ..., N) with zero columns for padding.
    """
    times = np.asarray(times, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    nb, n = times.shape
    out = np.zeros(query.shape + (n,))
    for b in range(nb):
        m = int(lengths[b])
        out[b, ..., :m] = basis_matrix(times[b, :m], query[b], kind)
    return out


@dataclass(frozen=True)
class SplineFunction:
    """An interpolant with knots ``times`` and knot values ``values`` (N x d)."""

    times: np.ndarray
    values: np.ndarray
    kind: str = "cubic"
    second: np.ndarray = field(repr=False, default=None)

    def __call__(self, t):
        return evaluate(self, t)

    def basis(self, t) -> np.ndarray:
        return basis_matrix(self.times, t, self.kind)

    def derivative(self, t, order: int = 1):
        """First or second derivative (inside the knot span, or the
        tangent-line continuation outside it)."""
        t = np.asarray(t, dtype=np.float64)
        x, y, M = self.times, self.values, self.second
        flat = t.reshape(-1)
        k = np.clip(np.searchsorted(x, flat, side="right") - 1, 0, len(x) - 2)
        tc = np.clip(flat, x[0], x[-1])
        h = (x[k + 1] - x[k])[:, None]
        A = ((x[k + 1] - tc)[:, None]) / h
        B = 1.0 - A
        if order == 1:
            out = (y[k + 1] - y[k]) / h - (3 * A ** 2 - 1) / 6.0 * h * M[k] + (3 * B ** 2 - 1) / 6.0 * h * M[k + 1]
        elif order == 2:
            out = A * M[k] + B * M[k + 1]
            outside = (flat < x[0]) | (flat > x[-1])
            out[outside] = 0.0
        else:
            raise ValueError("order must be 1 or 2")
        return out.reshape(t.shape + (y.shape[1],))


def fit(times, values, kind: str = "cubic") -> SplineFunction:
    if kind not in KINDS:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    x = _check_knots(times)
    y = np.asarray(values, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != len(x):
        raise ValueError(f"{len(x)} knot times but {y.shape[0]} knot values")
    G = second_derivative_operator(x) if kind == "cubic" else np.zeros((len(x), len(x)))
    return SplineFunction(x.copy(), y.copy(), kind, G @ y)


def evaluate(spline: SplineFunction, t) -> np.ndarray:
    return spline.basis(t) @ spline.values


def interpolate(times, values, query, kind: str = "cubic") -> Tensor:
    """Differentiable evaluation: ``basis(query) @ values`` with ``values``
    an N x d tensor."""
    W = basis_matrix(times, query, kind)
    lead = W.shape[:-1]
    flat = Tensor(W.reshape(-1, W.shape[-1]))
    out = matmul(flat, as_tensor(values))
    return out.reshape(lead + (out.shape[-1],))
