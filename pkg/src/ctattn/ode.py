"""Fixed-step RK4 integration, the parameterised vector field, and the
change of variables that maps every integration interval onto [-1, 1].

Once every interval is expressed in the dummy variable ``s``, the N x N
(key, query) systems of an attention layer share one step grid and are
advanced together by a single RK4 sweep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module

ACTIVATIONS = ("tanh", "sigmoid")


class SolverError(FloatingPointError):
    pass


@dataclass
class NFECounter:
    """Counts vector-field evaluations performed by the solver."""

    count: int = 0

    def reset(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    step_size: float = 0.1
    normalize_time: bool = True

    def __post_init__(self):
        if self.method != "rk4":
            raise ValueError(f"only fixed-step 'rk4' is available, got {self.method!r}")
        if not self.step_size > 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")


class FunctionField:
    """Wraps a plain ``f(t, x)`` callable with no trainable parameters."""

    params: tuple = ()

    def __init__(self, fn: Callable):
        self.fn = fn

    def evaluate(self, t, x, params=()):
        return self.fn(t, x)

    def __call__(self, t, x):
        return self.fn(t, x)


class VectorField(Module):
    """``f(t, x) = act(LN(W2 (W1 x + b1 + t w_t) + b2))``.

    ``norm=False`` drops the layer norm (the "Concat" variant).  With
    ``groups > 1`` the state is split into per-head blocks: the two linear
    maps become block diagonal and the layer norm runs per block, so each
    head evolves under its own field.  ``shared=True`` ties the blocks.
    """

    def __init__(self, dim: int, groups: int = 1, norm: bool = True, activation: str = "tanh",
                 shared: bool = False, rng: np.random.Generator | None = None, name: str = "field",
                 final_scale: float = 0.1):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        if dim % groups:
            raise ValueError(f"state dim {dim} not divisible by {groups} groups")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.groups, self.norm = dim, groups, norm
        self.activation, self.shared = activation, shared
        blk = dim // groups
        wdim = blk if shared else dim
        bound = math.sqrt(6.0 / (2 * blk))

        def weight(scale=1.0):
            w = rng.uniform(-bound, bound, size=(wdim, wdim)) * scale
            if not shared and groups > 1:
                w *= self.block_mask
            return w

        self.block_mask = np.kron(np.eye(groups), np.ones((blk, blk)))
        self.names = ["w1", "b1", "wt", "w2", "b2"]
        values = [weight(), np.zeros(dim), rng.uniform(-1.0, 1.0, size=dim),
                  weight(final_scale), np.zeros(dim)]
        if norm:
            # small gain keeps the initial field (and trajectories) nearly flat
            self.names += ["ln_g", "ln_b"]
            values += [np.full(dim, final_scale), np.zeros(dim)]
        for n, v in zip(self.names, values):
            setattr(self, n, Tensor(v, requires_grad=True, name=f"{name}.{n}"))

    @property
    def params(self) -> tuple[Tensor, ...]:
        return tuple(getattr(self, n) for n in self.names)

    def _weight(self, w: Tensor) -> Tensor:
        if self.shared and self.groups > 1:
            return ad.block_diag(w, self.groups)
        if self.groups > 1:
            return w * self.block_mask
        return w

    def evaluate(self, t, x: Tensor, params: Sequence[Tensor]) -> Tensor:
        w1, b1, wt, w2, b2 = params[:5]
        t = np.asarray(t, dtype=np.float64)
        if t.ndim:
            t = t[..., None] if t.shape[-1:] != (1,) else t
        h = ad.matmul(x, self._weight(w1)) + b1 + ad.mul(Tensor(t), wt)
        h = ad.matmul(h, self._weight(w2)) + b2
        if self.norm:
            h = ad.layer_norm(h, params[5], params[6], groups=self.groups)
        return ad.tanh(h) if self.activation == "tanh" else ad.sigmoid(h)

    def __call__(self, t, x):
        return self.evaluate(t, ad.as_tensor(x), self.params)

    # -- fused numpy path used by the solver's step op ----------------------

    def effective(self, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Parameter arrays with the block structure applied to the weights."""
        arrs = [p.data for p in params]
        for i in (0, 3):
            if self.shared and self.groups > 1:
                arrs[i] = np.kron(np.eye(self.groups), arrs[i])
            elif self.groups > 1:
                arrs[i] = arrs[i] * self.block_mask
        return arrs

    def _reduce_weight_grad(self, g: np.ndarray) -> np.ndarray:
        if self.shared and self.groups > 1:
            blk = self.dim // self.groups
            return g.reshape(self.groups, blk, self.groups, blk).diagonal(axis1=0, axis2=2).sum(-1)
        if self.groups > 1:
            return g * self.block_mask
        return g

    def np_eval(self, t, x: np.ndarray, eff: list[np.ndarray], scale=None):
        """Forward pass in plain numpy; returns the output and a cache for
        :meth:`np_vjp`."""
        d = self.dim
        lead = x.shape[:-1]
        u = (x.reshape(-1, d) @ eff[0]).reshape(x.shape)
        u += eff[1]
        u += np.asarray(t, dtype=np.float64) * eff[2]
        a = (u.reshape(-1, d) @ eff[3])
        a += eff[4]
        xh = inv = None
        if self.norm:
            if not hasattr(self, "_avg"):
                self._avg = ad._group_mean_matrix(d, self.groups)
            a -= a @ self._avg
            inv = 1.0 / np.sqrt((a * a) @ self._avg + 1e-5)
            a *= inv
            xh = a.copy()
            a *= eff[5]
            a += eff[6]
        if self.activation == "tanh":
            out = np.tanh(a, out=a)
        else:
            out = ad._sigmoid_np(a)
        out = out.reshape(lead + (d,))
        res = out * scale if scale is not None else out
        return res, (x, u, xh, inv, out, t)

    def np_vjp(self, eff: list[np.ndarray], cache, g: np.ndarray, scale=None):
        """Gradients w.r.t. the state and the effective parameter arrays."""
        x, u, xh, inv, out, t = cache
        d = self.dim
        gy = g * scale if scale is not None else g.copy()
        if self.activation == "tanh":
            gy *= 1.0 - out * out
        else:
            gy *= out * (1.0 - out)
        gy = gy.reshape(-1, d)
        grads = [None] * len(eff)
        if self.norm:
            grads[5] = (gy * xh).sum(axis=0)
            grads[6] = gy.sum(axis=0)
            gx = gy * eff[5]
            ga = inv * (gx - gx @ self._avg - xh * ((gx * xh) @ self._avg))
        else:
            ga = gy
        u2 = u.reshape(-1, d)
        grads[3] = u2.T @ ga
        grads[4] = ga.sum(axis=0)
        gu = ga @ eff[3].T
        x2 = x.reshape(-1, d)
        grads[0] = x2.T @ gu
        grads[1] = gu.sum(axis=0)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1] + (1,)).reshape(-1)
        grads[2] = tt @ gu
        gxs = (gu @ eff[0].T).reshape(x.shape)
        return gxs, grads

    def param_grads(self, grads: list[np.ndarray]) -> list[np.ndarray]:
        out = list(grads)
        out[0] = self._reduce_weight_grad(out[0])
        out[3] = self._reduce_weight_grad(out[3])
        return out


class ReparameterizedField:
    """``f~(s, x) = f(t(s), x) * (t_end - t_start) / 2`` with
    ``t(s) = (s (t_end - t_start) + t_start + t_end) / 2``, so solving on
    s in [-1, 1] from ``x(t_start)`` lands on ``x(t_end)``.

    ``t_start``/``t_end`` may be arrays broadcastable against the state's
    leading axes (trailing singleton for the feature axis).
    """

    def __init__(self, base, t_start, t_end):
        self.base = base
        self.t_start = np.asarray(t_start, dtype=np.float64)
        self.t_end = np.asarray(t_end, dtype=np.float64)
        self.half = (self.t_end - self.t_start) / 2.0
        self.mid = (self.t_end + self.t_start) / 2.0

    @property
    def params(self):
        return getattr(self.base, "params", ())

    def time_at(self, s):
        return s * self.half + self.mid

    def evaluate(self, s, x, params=()):
        t = self.time_at(s)
        return ad.mul(self.base.evaluate(t, x, params), Tensor(self.half))

    def __call__(self, s, x):
        return self.evaluate(s, ad.as_tensor(x), self.params)

    @property
    def supports_fused(self) -> bool:
        return isinstance(self.base, VectorField)

    def np_eval(self, s, x, eff):
        return self.base.np_eval(self.time_at(s), x, eff, self.half)

    def np_vjp(self, eff, cache, g):
        return self.base.np_vjp(eff, cache, g, self.half)


def reparameterize(t_i: float, t_j: float, field) -> ReparameterizedField:
    if t_j < t_i:
        raise ValueError(f"reparameterize integrates forward only: t_j={t_j} < t_i={t_i}")
    return ReparameterizedField(field, t_i, t_j)


def _rk4_step(field, s: float, ds: float):
    def step(x, *params):
        k1 = field.evaluate(s, x, params)
        k2 = field.evaluate(s + ds / 2, x + ad.scale(k1, ds / 2), params)
        k3 = field.evaluate(s + ds / 2, x + ad.scale(k2, ds / 2), params)
        k4 = field.evaluate(s + ds, x + ad.scale(k3, ds), params)
        return x + ad.scale(k1 + ad.scale(k2, 2.0) + ad.scale(k3, 2.0) + k4, ds / 6.0)
    return step


def _fused_rk4_step(field, s: float, ds: float, x: Tensor, params: tuple[Tensor, ...],
                    recompute: bool = True) -> Tensor:
    """One RK4 step as a single graph node with a hand-written backward
    pass.  The stages are pulled back in reverse order; with ``recompute``
    they are re-evaluated in the backward pass instead of being stored."""
    base = field.base

    def stages(x0, eff, keep):
        caches = []
        k1, c1 = field.np_eval(s, x0, eff)
        k2, c2 = field.np_eval(s + ds / 2, x0 + (ds / 2) * k1, eff)
        k3, c3 = field.np_eval(s + ds / 2, x0 + (ds / 2) * k2, eff)
        k4, c4 = field.np_eval(s + ds, x0 + ds * k3, eff)
        if keep:
            caches = [c1, c2, c3, c4]
        out = x0 + (ds / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return out, caches

    keep = not recompute and ad.is_grad_enabled() and any(p.requires_grad for p in (x,) + params)
    out, saved = stages(x.data, base.effective(params), keep=keep)

    def backward(g):
        eff = base.effective(params)
        if saved:
            c1, c2, c3, c4 = saved
        else:
            _, (c1, c2, c3, c4) = stages(x.data, eff, keep=True)
        total = [np.zeros_like(e) for e in eff]

        def pull(cache, gk):
            gx, gp = field.np_vjp(eff, cache, gk)
            for acc, gi in zip(total, gp):
                acc += gi
            return gx

        gx = g.copy()
        g4 = pull(c4, (ds / 6.0) * g)
        gx += g4
        g3 = pull(c3, (ds / 3.0) * g + ds * g4)
        gx += g3
        g2 = pull(c2, (ds / 3.0) * g + (ds / 2) * g3)
        gx += g2
        g1 = pull(c1, (ds / 6.0) * g + (ds / 2) * g2)
        gx += g1
        return (gx,) + tuple(base.param_grads(total))

    return ad.function(out, (x,) + tuple(params), backward, "rk4_step")


def _segment_steps(length: float, h: float) -> list[float]:
    n = max(1, math.ceil(length / h - 1e-9))
    steps = [h] * (n - 1)
    steps.append(length - h * (n - 1))
    return steps


def rk4_solve(field, x0, t0: float, grid: Sequence[float], step_size: float = 0.1,
              counter: NFECounter | None = None, checkpoint: bool = True) -> list[Tensor]:
    """Integrate ``dx/dt = field(t, x)`` from ``t0`` and return the state at
    each time in ``grid``.

    Steps are ``step_size`` long except the last one before each grid point,
    which is shortened to land on it exactly.  Each step is a single graph
    node.  With ``checkpoint`` the stage values are recomputed during the
    backward pass, so memory holds one state per step; without it they are
    kept, trading memory for a third less work.
    """
    if not step_size > 0:
        raise ValueError(f"step size must be positive, got {step_size}")
    grid = [float(g) for g in grid]
    if any(b < a for a, b in zip([t0] + grid[:-1], grid)):
        raise ValueError("grid must be non-decreasing and start at or after t0")
    x = ad.as_tensor(x0)
    params = tuple(getattr(field, "params", ()))
    fused = getattr(field, "supports_fused", False)
    states, t, step_index = [], float(t0), 0
    for target in grid:
        if target > t:
            for ds in _segment_steps(target - t, step_size):
                if fused:
                    x = _fused_rk4_step(field, t, ds, x, params, recompute=checkpoint)
                else:
                    step = _rk4_step(field, t, ds)
                    x = ad.checkpoint(step, x, *params) if checkpoint else step(x, *params)
                if counter is not None:
                    counter.add(4)
                if not np.all(np.isfinite(x.data)):
                    raise SolverError(f"non-finite state after RK4 step {step_index} (t={t + ds:.6g})")
                t += ds
                step_index += 1
            t = target
        states.append(x)
    return states


@dataclass
class BatchedState:
    """States of all (query j, key i) systems at each grid node.

    ``states[p]`` has shape (B, M, N, d): batch, query index, key index,
    feature.  ``t_start``/``t_end`` broadcast to (B, M, N, 1).
    """

    states: list[Tensor]
    grid: np.ndarray
    t_start: np.ndarray
    t_end: np.ndarray
    nfe: int = 0

    def times(self) -> np.ndarray:
        """Physical time of every (b, j, i, p) entry, shape (B, M, N, P)."""
        half = (self.t_end - self.t_start) / 2.0
        mid = (self.t_end + self.t_start) / 2.0
        return self.grid * half + mid

    def stacked(self) -> Tensor:
        """All grid states as one tensor of shape (B, M, N, P, d)."""
        return ad.stack(self.states, axis=3)


def batched_solve(field, inits, key_times, query_times, grid, step_size: float = 0.1,
                  counter: NFECounter | None = None, checkpoint: bool = True) -> BatchedState:
    """Solve every key trajectory over every (key time, query time) interval
    in one sweep of the dummy variable from -1 through ``grid``.

    ``inits``: (B, N, d) or (N, d) initial states at ``key_times`` (B, N).
    ``query_times``: (B, M).  Entry (b, j, i) of each returned state is
    ``x_i((s (tq_j - tk_i) + tk_i + tq_j) / 2)`` at ``s = grid[p]``.
    Intervals with ``tq_j < tk_i`` integrate backwards in physical time.
    """
    inits = ad.as_tensor(inits)
    key_times = np.asarray(key_times, dtype=np.float64)
    query_times = np.asarray(query_times, dtype=np.float64)
    squeeze = inits.ndim == 2
    if squeeze:
        inits = inits.reshape((1,) + inits.shape)
        key_times = key_times[None]
        query_times = query_times[None]
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(grid < -1.0 - 1e-12) or np.any(grid > 1.0 + 1e-12) or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted inside [-1, 1]")
    nb, n, d = inits.shape
    m = query_times.shape[1]
    t_start = key_times[:, None, :, None]
    t_end = query_times[:, :, None, None]
    x0 = ad.broadcast_to(inits.reshape(nb, 1, n, d), (nb, m, n, d))
    local = counter if counter is not None else NFECounter()
    before = local.count
    states = rk4_solve(ReparameterizedField(field, t_start, t_end), x0, -1.0, grid,
                       step_size, local, checkpoint)
    out = BatchedState(states, grid, t_start, t_end, local.count - before)
    if squeeze:
        out.states = [s.reshape(s.shape[1:]) for s in out.states]
        out.t_start, out.t_end = t_start[0], t_end[0]
    return out
