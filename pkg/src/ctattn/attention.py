"""Continuous-time attention.

Keys and values are trajectories ``k_i(t)``, ``v_i(t)`` that start at the
projected observations ``K_i``/``V_i`` and evolve under learned vector
fields.  The query is a spline through the projected observations ``Q``.
For a query time ``t_j`` the score of key ``i`` is the time-average of
``q . k_i`` over ``[t_i, t_j]`` and the value is the time-average of
``v_i``; a softmax over keys mixes the averaged values.

Every average is computed with a quadrature rule on the dummy interval
[-1, 1], so the trajectories only need to be known at the rule's nodes.
All ``(query j, key i)`` systems are solved in one batched sweep.

Tensor layout: ``B`` sequences, ``M`` query times, ``N`` keys, ``H`` heads,
``d`` model width split into ``H`` contiguous head blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .interp import SplineFunction, basis_matrix, batched_basis, fit
from .nn import Module, xavier
from .ode import BatchedState, NFECounter, VectorField, batched_solve
from .quadrature import QuadratureRule, make_rule

DIAG_TOL = 1e-9


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 1
    causal: bool = False
    normalize: bool = True       # divide the interval integrals by (t_j - t_i)
    rule: QuadratureRule = field(default_factory=lambda: make_rule("linear"))
    step_size: float = 0.1
    interp: str = "cubic"
    recompute: bool = True       # recompute solver stages in the backward pass

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")


@dataclass
class AttentionField:
    """Scores, softmax weights (both (B, M, N, H)) and expected values
    (B, M, N, d) for every query/key pair, plus the mask used."""

    scores: Tensor
    weights: Tensor
    values: Tensor
    mask: np.ndarray


def head_sum_matrix(width: int, heads: int) -> np.ndarray:
    """(width, heads) 0/1 matrix summing each head's block of features."""
    if width % heads:
        raise ValueError(f"width {width} is not divisible by {heads} heads")
    return np.kron(np.eye(heads), np.ones((width // heads, 1)))


def attention_mask(key_times, query_times, lengths=None, causal: bool = False) -> np.ndarray:
    """Boolean (B, M, N, 1): True where key i may be attended from query j."""
    key_times = np.asarray(key_times, dtype=np.float64)
    query_times = np.asarray(query_times, dtype=np.float64)
    nb, n = key_times.shape
    mask = np.ones((nb, query_times.shape[1], n, 1), dtype=bool)
    if lengths is not None:
        valid = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
        mask &= valid[:, None, :, None]
    if causal:
        mask &= (key_times[:, None, :] <= query_times[:, :, None] + DIAG_TOL)[..., None]
    return mask


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 3:
        raise ad.ShapeError(f"expected (N, d) or (B, N, d) input, got shape {x.shape}")
    return x, False


def _times(times, nb: int) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    return np.broadcast_to(times, (nb, times.shape[-1])) if times.ndim == 1 else times


def _check_times(times: np.ndarray, lengths) -> None:
    for b, row in enumerate(times):
        m = len(row) if lengths is None else int(lengths[b])
        if m >= 2 and not np.all(np.diff(row[:m]) > 0):
            raise ValueError("reference times must be strictly increasing")


def query_basis(key_times, lengths, times, kind: str = "cubic") -> np.ndarray:
    """Spline basis through each sequence's valid knots, evaluated at
    ``times`` of shape (B, ...).  Returns (B, ..., N)."""
    key_times = np.asarray(key_times, dtype=np.float64)
    nb, n = key_times.shape
    if lengths is None:
        if n == 1:
            return np.ones(np.shape(times) + (1,))
        return np.stack([basis_matrix(key_times[b], times[b], kind) for b in range(nb)])
    lengths = np.asarray(lengths)
    out = np.zeros(np.shape(times) + (n,))
    for b in range(nb):
        m = int(lengths[b])
        if m == 1:
            out[b, ..., 0] = 1.0
        else:
            out[b, ..., :m] = basis_matrix(key_times[b, :m], times[b], kind)
    return out


def _apply_basis(W: np.ndarray, Q: Tensor) -> Tensor:
    """Batched ``W @ Q`` with W (B, ..., N) and Q (B, N, d)."""
    nb, n = W.shape[0], W.shape[-1]
    lead = W.shape[1:-1]
    out = ad.matmul(Tensor(W.reshape(nb, -1, n)), Q)
    return out.reshape((nb,) + lead + (Q.shape[-1],))


def _constant_state(init: Tensor, key_times, query_times, grid) -> BatchedState:
    """Trajectories of a zero field: the initial state at every node."""
    nb, n, d = init.shape
    m = query_times.shape[1]
    x = ad.broadcast_to(init.reshape(nb, 1, n, d), (nb, m, n, d))
    return BatchedState([x] * len(grid), np.asarray(grid, dtype=np.float64),
                        key_times[:, None, :, None], query_times[:, :, None, None])


def continuous_keys_values(K, V, key_times, query_times, rule: QuadratureRule,
                           field_k=None, field_v=None, step_size: float = 0.1,
                           counter: NFECounter | None = None,
                           recompute: bool = True) -> tuple[BatchedState, BatchedState]:
    """Key and value trajectories sampled at the rule's nodes for every
    (query, key) interval.

    ``field_k``/``field_v`` of None means a zero field (constant
    trajectories).  If only ``field_k`` is given it is taken to act on the
    concatenated state ``[K | V]`` and both trajectories come from one solve.
    """
    K, _ = _as_batch(K)
    V, _ = _as_batch(V)
    nb = K.shape[0]
    key_times = _times(key_times, nb)
    query_times = _times(query_times, nb)
    grid = rule.nodes

    def solve(field, init):
        if field is None:
            return _constant_state(init, key_times, query_times, grid)
        return batched_solve(field, init, key_times, query_times, grid, step_size, counter,
                             checkpoint=recompute)

    if field_k is not None and field_v is None and getattr(field_k, "dim", None) == K.shape[-1] + V.shape[-1]:
        joint = solve(field_k, ad.concat([K, V], axis=-1))
        d = K.shape[-1]
        ks = [s[..., :d] for s in joint.states]
        vs = [s[..., d:] for s in joint.states]
        mk = BatchedState(ks, joint.grid, joint.t_start, joint.t_end, joint.nfe)
        mv = BatchedState(vs, joint.grid, joint.t_start, joint.t_end, 0)
        return mk, mv
    return solve(field_k, K), solve(field_v, V)


def attention_scores(q_nodes: Sequence[Tensor], keys: BatchedState, rule: QuadratureRule,
                     heads: int, normalize: bool = True, diag_exact: Tensor | None = None) -> Tensor:
    """Per-head scores (B, M, N, H).

    ``q_nodes[p]`` is the query spline at the physical time of node ``p`` of
    every interval, shape (B, M, N, d).  Normalised scores are
    ``1/2 sum_p w_p q.k`` (the interval length cancels); raw scores keep it.
    ``diag_exact`` (B, M, N, H) replaces entries whose interval is shorter
    than ``DIAG_TOL`` with the limit value ``q(t_i) . K_i``.
    """
    acc = None
    for w, q, k in zip(rule.weights, q_nodes, keys.states):
        term = ad.scale(q * k, 0.5 * w)
        acc = term if acc is None else acc + term
    scores = ad.matmul(acc, head_sum_matrix(acc.shape[-1], heads))
    interval = np.broadcast_to(keys.t_end - keys.t_start, scores.shape[:-1] + (1,))
    diag = np.abs(interval) < DIAG_TOL
    if not normalize:
        return ad.mul(scores, Tensor(interval))
    if diag_exact is not None and diag.any():
        scores = ad.where(np.broadcast_to(diag, scores.shape), diag_exact, scores)
    return scores


def expected_values(values: BatchedState, rule: QuadratureRule, normalize: bool = True,
                    V: Tensor | None = None) -> Tensor:
    """Time-averaged values (B, M, N, d); the diagonal is ``V_i`` itself."""
    acc = None
    for w, v in zip(rule.weights, values.states):
        term = ad.scale(v, 0.5 * w)
        acc = term if acc is None else acc + term
    interval = np.broadcast_to(values.t_end - values.t_start, acc.shape[:-1] + (1,))
    if not normalize:
        return ad.mul(acc, Tensor(interval))
    diag = np.abs(interval) < DIAG_TOL
    if V is not None and diag.any():
        nb, n, d = V.shape
        exact = ad.broadcast_to(V.reshape(nb, 1, n, d), acc.shape)
        acc = ad.where(np.broadcast_to(diag, acc.shape), exact, acc)
    return acc


def ct_attention(Q, K, V, key_times, query_times=None, config: AttentionConfig = AttentionConfig(),
                 field_k=None, field_v=None, lengths=None,
                 counter: NFECounter | None = None) -> tuple[Tensor, AttentionField]:
    """Continuous-time attention over projected inputs.

    ``Q``, ``K``, ``V``: (B, N, d) or (N, d).  ``key_times``: (B, N) or (N,),
    strictly increasing over the first ``lengths[b]`` entries.
    ``query_times`` defaults to ``key_times``.  Returns the output
    (B, M, d) (or (M, d) for unbatched input) and the attention field.
    """
    Q, squeeze = _as_batch(Q)
    K, _ = _as_batch(K)
    V, _ = _as_batch(V)
    nb, n, d = K.shape
    if Q.shape != K.shape or V.shape[:2] != K.shape[:2]:
        raise ad.ShapeError(f"Q {Q.shape}, K {K.shape}, V {V.shape} do not line up")
    heads = config.heads
    if d % heads:
        raise ad.ShapeError(f"model width {d} not divisible by {heads} heads")
    key_times = _times(key_times, nb)
    query_times = key_times if query_times is None else _times(query_times, nb)
    _check_times(key_times, lengths)
    rule = config.rule

    keys, vals = continuous_keys_values(K, V, key_times, query_times, rule, field_k, field_v,
                                        config.step_size, counter, config.recompute)
    node_times = keys.times()                           # (B, M, N, P)
    W = query_basis(key_times, lengths, np.moveaxis(node_times, -1, 1), config.interp)
    q_nodes_all = _apply_basis(W, Q)                    # (B, P, M, N, d)
    q_nodes = [q_nodes_all[:, p] for p in range(rule.size)]

    S = head_sum_matrix(d, heads)
    q_query = _apply_basis(query_basis(key_times, lengths, query_times, config.interp), Q)
    m = query_times.shape[1]
    exact = ad.matmul(q_query.reshape(nb, m, 1, d) * K.reshape(nb, 1, n, d), S)
    scores = attention_scores(q_nodes, keys, rule, heads, config.normalize, exact)
    v_hat = expected_values(vals, rule, config.normalize, V)

    mask = attention_mask(key_times, query_times, lengths, config.causal)
    weights = ad.softmax(ad.scale(scores, 1.0 / math.sqrt(d // heads)), axis=2, mask=mask)
    w_full = ad.matmul(weights, S.T)                    # (B, M, N, d)
    out = ad.tsum(w_full * v_hat, axis=2)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out, AttentionField(scores, weights, v_hat, mask)


class CTMultiHeadAttention(Module):
    """Projections ``W^Q, W^K, W^V, W^O`` and the key/value vector fields.

    Each head's block of ``[K | V]`` evolves under its own field; the joint
    state is advanced by a single block-diagonal field with ``2H`` groups.
    ``shared_field=True`` ties the field parameters across all blocks.
    """

    def __init__(self, width: int, config: AttentionConfig, rng: np.random.Generator,
                 field_norm: bool = True, field_activation: str = "tanh",
                 shared_field: bool = False, zero_field: bool = False):
        if width % config.heads:
            raise ValueError(f"d_model {width} not divisible by {config.heads} heads")
        self.width = width
        self.config = config
        self.wq = Tensor(xavier(rng, width, width), requires_grad=True)
        self.wk = Tensor(xavier(rng, width, width), requires_grad=True)
        self.wv = Tensor(xavier(rng, width, width), requires_grad=True)
        self.wo = Tensor(xavier(rng, width, width), requires_grad=True)
        self.field = None if zero_field else VectorField(
            2 * width, groups=2 * config.heads, norm=field_norm, activation=field_activation,
            shared=shared_field, rng=rng, name="kv_field")

    def __call__(self, x, key_times, query_times=None, lengths=None,
                 counter: NFECounter | None = None, return_field: bool = False):
        x = ad.as_tensor(x)
        out, fld = ct_attention(ad.matmul(x, self.wq), ad.matmul(x, self.wk), ad.matmul(x, self.wv),
                                key_times, query_times, self.config, self.field, None,
                                lengths, counter)
        out = ad.matmul(out, self.wo)
        return (out, fld) if return_field else out


def ct_mha(X, key_times, weights: dict, config: AttentionConfig, field=None, query_times=None,
           lengths=None, counter: NFECounter | None = None) -> Tensor:
    """Functional multi-head form: ``weights`` holds ``wq, wk, wv, wo``;
    ``field`` acts on the joint ``[K | V]`` state (or None for zero fields)."""
    X = ad.as_tensor(X)
    out, _ = ct_attention(ad.matmul(X, weights["wq"]), ad.matmul(X, weights["wk"]),
                          ad.matmul(X, weights["wv"]), key_times, query_times, config,
                          field, None, lengths, counter)
    return ad.matmul(out, weights["wo"])


def discrete_attention(Q, K, V, heads: int = 1, mask=None) -> np.ndarray:
    """Reference scaled dot-product multi-head attention in plain numpy.
    ``mask`` (M, N) marks allowed pairs."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    d = Q.shape[-1]
    dk = d // heads
    out = np.zeros((Q.shape[0], V.shape[-1]))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = Q[:, sl] @ K[:, sl].T / math.sqrt(dk)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ V[:, sl]
    return out


# ---------------------------------------------------------------------------
# Constructive key functions reproducing an arbitrary score matrix
# ---------------------------------------------------------------------------

class UniversalKey:
    """Closed-form key function ``k_i(t)`` for one column of a target score
    matrix.  With ``h`` the cubic spline through the column and
    ``g(t) = h'(t) (t - t_i) + h(t)``, the key is
    ``k(t) = q(t) g(t) / |q(t)|^2 + c / q(t)`` (elementwise division), where
    ``c`` sums to zero so that ``q . k = g`` and ``k(t_i) = K_i``.
    """

    def __init__(self, q: SplineFunction, column: np.ndarray, times: np.ndarray, index: int,
                 K_i: np.ndarray):
        self.q = q
        self.t_i = float(times[index])
        self.K_i = np.asarray(K_i, dtype=np.float64)
        self.h = fit(times, column, "cubic")
        q_i = q(self.t_i)
        g_i = self.g(self.t_i)
        residual = np.asarray(K_i, dtype=np.float64) - q_i * g_i / np.dot(q_i, q_i)
        self.c = residual * q_i

    def g(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (self.h.derivative(t)[..., 0] * (t - self.t_i) + self.h(t)[..., 0])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        qt = self.q(t)
        return qt * (self.g(t) / np.sum(qt * qt, axis=-1))[..., None] + self.c / qt


def construct_universal_keys(target, q: SplineFunction, K, times, check_points: int = 400):
    """Key functions whose continuous scores at the knot times reproduce
    ``target`` (entry (j, i) is the score of key i at query time t_j).

    Raises if ``target``'s diagonal differs from ``q(t_i) . K_i`` or if a
    coordinate of ``q`` reaches zero on ``[t_1, t_N]``.
    """
    target = np.asarray(target, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    n = len(times)
    if target.shape != (n, n):
        raise ValueError(f"target must be {n}x{n}, got {target.shape}")
    diag = np.einsum("id,id->i", q(times), K)
    if not np.allclose(np.diag(target), diag, rtol=1e-9, atol=1e-9):
        raise ValueError("target diagonal must equal q(t_i) . K_i")
    dense = q(np.linspace(times[0], times[-1], check_points))
    if np.any(np.abs(dense) < 1e-8) or np.any(np.sign(dense) != np.sign(dense[:1])):
        raise ValueError("a coordinate of q reaches zero on the window; the construction needs "
                         "every coordinate bounded away from zero")
    return [UniversalKey(q, target[:, i], times, i, K[i]) for i in range(n)]


def approximate_attention(q: SplineFunction, keys, times, rule: QuadratureRule,
                          subdivisions: int = 1, split_at_knots: bool = True) -> np.ndarray:
    """Continuous score matrix for explicit key functions.

    Entry (j, i) is ``int_{t_i}^{t_j} q . k_i / (t_j - t_i)`` by composite
    quadrature: the interval is cut at interior knots (when
    ``split_at_knots``) and each piece into ``subdivisions`` equal parts.
    The diagonal is the limit ``q(t_i) . k_i(t_i) = q(t_i) . K_i``.
    """
    times = np.asarray(times, dtype=np.float64)
    n = len(times)
    out = np.zeros((n, n))
    for i, key in enumerate(keys):
        for j in range(n):
            a, b = times[i], times[j]
            if abs(b - a) < DIAG_TOL:
                out[j, i] = float(np.dot(q(a), key.K_i))
                continue
            lo, hi = min(a, b), max(a, b)
            cuts = [lo]
            if split_at_knots:
                cuts += [t for t in times if lo < t < hi]
            cuts.append(hi)
            edges = []
            for u, v in zip(cuts[:-1], cuts[1:]):
                edges.extend(np.linspace(u, v, subdivisions + 1)[:-1])
            edges.append(hi)
            total = 0.0
            for u, v in zip(edges[:-1], edges[1:]):
                half, mid = (v - u) / 2.0, (v + u) / 2.0
                tau = rule.nodes * half + mid
                total += half * float(rule.weights @ np.einsum("pd,pd->p", q(tau), key(tau)))
            out[j, i] = total / (hi - lo)
    return out


def random_universal_case(rng: np.random.Generator, n: int, d: int):
    """Random instance: sorted times in [0, 1], query knots with entries in
    [0.5, 1.5], redrawn until q stays positive on the window, random keys, and a
    random target whose diagonal is consistent with them."""
    times = np.sort(rng.uniform(0.0, 1.0, n))
    while n > 1 and np.min(np.diff(times)) < 0.05:
        times = np.sort(rng.uniform(0.0, 1.0, n))
    while True:
        # cubic overshoot can still pull a coordinate through zero: resample
        Q = rng.uniform(0.5, 1.5, size=(n, d))
        q = fit(times, Q, "cubic")
        if np.all(q(np.linspace(times[0], times[-1], 400)) > 1e-3):
            break
    K = rng.normal(size=(n, d))
    target = rng.normal(size=(n, n))
    np.fill_diagonal(target, np.einsum("id,id->i", q(times), K))
    return times, q, K, target


def verify_universal(cases: int = 10, rule: QuadratureRule | None = None, seed: int = 0,
                     sizes=(2, 3, 4), dims=(2, 3)) -> list[dict]:
    """Build key functions for random targets and report the reconstruction
    error of the quadrature evaluation and of a 10x finer oracle."""
    rule = rule if rule is not None else make_rule("gauss", 5)
    rng = np.random.default_rng(seed)
    reports = []
    for c in range(cases):
        n = sizes[c % len(sizes)]
        d = dims[(c // len(sizes)) % len(dims)]
        times, q, K, target = random_universal_case(rng, n, d)
        keys = construct_universal_keys(target, q, K, times)
        approx = approximate_attention(q, keys, times, rule)
        oracle = approximate_attention(q, keys, times, rule, subdivisions=10)
        whole = approximate_attention(q, keys, times, rule, split_at_knots=False)
        reports.append({"case": c, "n": n, "d": d,
                        "max_error": float(np.abs(approx - target).max()),
                        "oracle_error": float(np.abs(oracle - target).max()),
                        "unsplit_error": float(np.abs(whole - target).max())})
    return reports
