"""Synthetic marked temporal point process: a generator with a
time-aware kernel between consecutive events, a softplus intensity head on
top of an encoder, the Monte-Carlo log-likelihood, and the multi-task loss
with next-event time and type prediction."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..model import ModelConfig, build_model
from ..nn import Module, xavier
from ..optim import Adam, clip_grad_norm

X_MEAN = np.array([0.78, 0.11, -1.0, -0.56, -0.78, 1.0, 0.56, -0.33, 0.3, -0.11])
V_MEAN = np.array([-0.17, 0.5, -0.28, 0.28, 0.17, 0.39, -0.05, 0.05, -0.39, -0.5])
DECAY = np.array([0.5, 0.0, 0.28, 0.17, 0.22, 0.44, 0.33, 0.11, 0.05, 0.39])
MU_X = 0.01
MU_V = 0.01
TMAX = 20.0
N_TYPES = 10
# a zero decay constant would divide by zero; such events vanish immediately
MIN_DECAY = 1e-6
TRANSITION_SEED = 0


def transition_matrix(n_types: int = N_TYPES, seed: int = TRANSITION_SEED) -> np.ndarray:
    """Fixed row-stochastic type-transition matrix: uniform variates,
    normalised per row, from a dedicated seed."""
    u = np.random.default_rng(seed).uniform(size=(n_types, n_types))
    return u / u.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class Event:
    t: float
    k: int
    x: float
    v: float
    d: float


@dataclass
class EventSequence:
    events: list[Event]
    n_types: int = N_TYPES
    tmax: float = TMAX

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events])

    @property
    def types(self) -> np.ndarray:
        return np.array([e.k for e in self.events], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.events)

    def to_record(self) -> dict:
        return {"seq": [asdict(e) for e in self.events]}

    @classmethod
    def from_record(cls, rec: dict, n_types: int = N_TYPES, tmax: float = TMAX) -> "EventSequence":
        return cls([Event(float(e["t"]), int(e["k"]), float(e["x"]), float(e["v"]), float(e["d"]))
                    for e in rec["seq"]], n_types, tmax)


def kernel_weight(e: Event, last: Event) -> float:
    """Pairwise weight between a history event and the most recent one."""
    return (e.t - last.t) * (e.x * last.v - last.x * e.v)


def generator_intensity(history: list[Event], t) -> np.ndarray:
    """Total intensity ``softplus(sum_e w(e, last) exp(-(t - e.t) / e.d))``."""
    t = np.asarray(t, dtype=np.float64)
    last = history[-1]
    s = np.zeros_like(t)
    for e in history:
        w = kernel_weight(e, last)
        if w != 0.0:
            s = s + w * np.exp(-(t - e.t) / e.d)
    return np.logaddexp(0.0, s)


def expected_next_time(history: list[Event], step: float = 0.01, chunk: float = 5.0,
                       tol: float = 1e-12, max_horizon: float = 1e4) -> float:
    """Mean of the next event time, ``t_j + int_0^inf S(u) du`` with ``S``
    the survival function, by cumulative trapezoids on a fine grid.  The
    intensity tends to ``log 2`` once the kernel has decayed, so the tail
    left beyond the grid is closed in form as ``S(U) / lambda(U)``."""
    t0 = history[-1].t
    total, cum, u0 = 0.0, 0.0, 0.0
    lam_prev = float(generator_intensity(history, t0))
    while u0 < max_horizon:
        u = u0 + np.arange(1, int(round(chunk / step)) + 1) * step
        lam = generator_intensity(history, t0 + u)
        lam_all = np.concatenate([[lam_prev], lam])
        big = cum + np.concatenate([[0.0], np.cumsum((lam_all[1:] + lam_all[:-1]) * step / 2)])
        surv = np.exp(-big)
        total += float(np.sum((surv[1:] + surv[:-1]) * step / 2))
        cum, lam_prev, u0 = big[-1], lam[-1], u[-1]
        if surv[-1] < tol:
            break
    return t0 + total + float(np.exp(-cum) / lam_prev)


def gen_mtpp(seed: int, tmax: float = TMAX, transition: np.ndarray | None = None) -> EventSequence:
    """One sequence.  The first event sits at time 0 with a uniform type;
    each next time is the expected time under the current intensity and
    each next type is drawn from the transition row of the previous type.
    Marks: ``x ~ N(X_k, 0.01)``, ``v ~ N(V_k, 0.01)``, ``d = D_k``.  The
    first event past ``tmax`` is discarded."""
    if not 0 <= seed < 500:
        raise ValueError(f"seed must lie in [0, 500), got {seed}")
    P = transition_matrix() if transition is None else transition
    rng = np.random.RandomState(seed)

    def make(t, k):
        return Event(float(t), int(k), float(rng.normal(X_MEAN[k], MU_X)),
                     float(rng.normal(V_MEAN[k], MU_V)), float(max(DECAY[k], MIN_DECAY)))

    events = [make(0.0, rng.randint(N_TYPES))]
    while True:
        t_next = expected_next_time(events)
        if t_next > tmax:
            break
        k = rng.choice(N_TYPES, p=P[events[-1].k])
        events.append(make(t_next, k))
    return EventSequence(events, N_TYPES, tmax)


def gen_mtpp_dataset(count: int, first_seed: int = 0) -> list[EventSequence]:
    return [gen_mtpp(first_seed + i) for i in range(count)]


def save_sequences(path, seqs: list[EventSequence]) -> None:
    Path(path).write_text("".join(json.dumps(s.to_record()) + "\n" for s in seqs))


def load_sequences(path) -> list[EventSequence]:
    return [EventSequence.from_record(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Likelihood pieces
# ---------------------------------------------------------------------------

def mc_compensator(intensity, starts, ends, n_samples: int, rng: np.random.Generator) -> Tensor:
    """Monte-Carlo estimate of ``int_{start}^{end} lambda`` per interval:
    ``(end - start) * mean(lambda(u))`` with ``u ~ U(start, end)``.

    ``intensity`` maps an array of times (shape ``starts.shape + (S,)``)
    to a Tensor of total intensities of the same shape.
    """
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    gap = ends - starts
    u = starts[..., None] + gap[..., None] * rng.uniform(size=starts.shape + (n_samples,))
    lam = ad.as_tensor(intensity(u))
    return ad.mul(ad.mean(lam, axis=-1), gap)


def mc_log_likelihood(intensity, times, n_samples: int, rng: np.random.Generator) -> Tensor:
    """``sum_{j>=2} log lambda(t_j) - int_{t_1}^{t_N} lambda`` for one
    sequence, with the integral estimated per inter-event interval."""
    times = np.asarray(times, dtype=np.float64)
    lam_events = ad.as_tensor(intensity(times[1:]))
    if np.any(lam_events.data <= 0):
        raise ValueError("intensity must be positive at every event time")
    comp = mc_compensator(intensity, times[:-1], times[1:], n_samples, rng)
    return ad.tsum(ad.log(lam_events)) - ad.tsum(comp)


class IntensityHead(Module):
    """``lambda_k(t) = beta_k softplus((alpha_k (t - t_j) / (t_j + 1)
    + w_k . h(t_j) + b_k) / beta_k)`` on ``[t_j, t_{j+1})``.

    The elapsed time is divided by ``t_j + 1`` rather than ``t_j`` so the
    interval after an event at time 0 stays finite.
    """

    def __init__(self, width: int, n_types: int, rng: np.random.Generator):
        self.alpha = Tensor(np.full(n_types, -0.1), requires_grad=True)
        self.w = Tensor(xavier(rng, width, n_types), requires_grad=True)
        self.b = Tensor(np.zeros(n_types), requires_grad=True)
        self.log_beta = Tensor(np.zeros(n_types), requires_grad=True)

    def base(self, h: Tensor) -> Tensor:
        return ad.matmul(h, self.w) + self.b

    def __call__(self, base: Tensor, t_last, t) -> Tensor:
        """Per-type intensities; ``base`` (..., K) from :meth:`base`,
        ``t_last`` (...), ``t`` (..., S).  Returns (..., S, K)."""
        t_last = np.asarray(t_last, dtype=np.float64)
        elapsed = (np.asarray(t, dtype=np.float64) - t_last[..., None]) / (t_last[..., None] + 1.0)
        lead = base.shape[:-1]
        pre = ad.mul(Tensor(elapsed[..., None]), self.alpha) + base.reshape(lead + (1, base.shape[-1]))
        beta = ad.exp(self.log_beta)
        return ad.mul(ad.softplus(ad.div(pre, beta)), beta)


# ---------------------------------------------------------------------------
# Model, batching and training
# ---------------------------------------------------------------------------

@dataclass
class MTPPTrainConfig:
    iters: int = 200
    batch: int = 16
    lr: float = 1e-2
    mc_samples: int = 20
    alpha_reg: float = 0.01
    alpha_pred: float = 1.0
    horizon_factor: float = 10.0     # time-prediction integral runs over this many mean gaps
    horizon_points: int = 100
    clip: float = 0.0
    log_every: int = 20


def mtpp_model_config(**overrides) -> ModelConfig:
    base = dict(kind="contiformer", input="categorical", input_dim=N_TYPES, d_model=16, heads=2,
                layers=1, causal=True, interp="linear")
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Batch:
    times: np.ndarray        # (B, N) raw times, padded with the last valid time
    types: np.ndarray        # (B, N)
    lengths: np.ndarray      # (B,)

    @property
    def interval_mask(self) -> np.ndarray:
        """(B, N-1): True where (t_j, t_{j+1}) is a real interval."""
        n = self.times.shape[1]
        return np.arange(1, n)[None, :] < self.lengths[:, None]


def make_batch(seqs: list[EventSequence]) -> Batch:
    lengths = np.array([len(s) for s in seqs])
    if lengths.min() < 2:
        raise ValueError("every sequence needs at least two events")
    n = lengths.max()
    times = np.zeros((len(seqs), n))
    types = np.zeros((len(seqs), n), dtype=np.int64)
    for b, s in enumerate(seqs):
        m = len(s)
        times[b, :m] = s.times
        times[b, m:] = s.times[-1]
        types[b, :m] = s.types
    return Batch(times, types, lengths)


class MTPPModel:
    """Causal encoder over (type, time) tokens plus the intensity head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.net = build_model(config, rng)
        self.head = IntensityHead(config.d_model, config.input_dim, rng)

    def named_parameters(self) -> dict:
        params = {f"net.{k}": v for k, v in self.net.named_parameters().items()}
        params.update({f"head.{k}": v for k, v in self.head.named_parameters().items()})
        return params

    def modules(self) -> dict:
        return {"net": self.net, "head": self.head}

    def train(self, mode: bool = True):
        self.net.train(mode)
        self.head.train(mode)

    def encode(self, batch: Batch, rng=None) -> Tensor:
        """Hidden states ``h(t_j)`` (B, N, d).  Attention runs on times
        scaled to [0, 1] per sequence; the temporal encoding sees raw times."""
        span = np.maximum(batch.times[np.arange(len(batch.lengths)), batch.lengths - 1], 1e-9)
        norm = batch.times / span[:, None]
        return self.net(batch.types, norm, enc_times=batch.times, lengths=batch.lengths, rng=rng)


def expected_time(total, t_last, horizon: float, points: int) -> Tensor:
    """Next-event time ``int t lambda(t) exp(-int lambda)`` by the trapezoid
    rule on ``points`` nodes over ``[t_last, t_last + horizon]``."""
    t_last = np.asarray(t_last, dtype=np.float64)
    s = np.linspace(0.0, horizon, points)
    grid = t_last[..., None] + s
    lam_grid = total(grid)
    dt = s[1] - s[0]
    seg = ad.scale(lam_grid[..., 1:] + lam_grid[..., :-1], dt / 2)
    cum = ad.concat([Tensor(np.zeros(seg.shape[:-1] + (1,))), ad.cumsum(seg, axis=-1)], axis=-1)
    dens = ad.mul(ad.mul(lam_grid, ad.exp(-cum)), grid)
    return ad.tsum(ad.scale(dens[..., 1:] + dens[..., :-1], dt / 2), axis=-1)


def time_loss(t_hat, t_next, mask) -> Tensor:
    """Masked sum of squared next-time errors."""
    err = ad.as_tensor(t_hat) - np.asarray(t_next, dtype=np.float64)
    return ad.tsum(ad.mul(err * err, np.asarray(mask, dtype=np.float64)))


def type_loss(lam_k, types, mask) -> Tensor:
    """Masked sum of ``-log(lambda_k / lambda)`` at the true next types."""
    lam_k = ad.as_tensor(lam_k)
    onehot = np.eye(lam_k.shape[-1])[np.asarray(types)]
    log_ratio = ad.log(ad.tsum(ad.mul(lam_k, onehot), axis=-1)) - ad.log(ad.tsum(lam_k, axis=-1))
    return -ad.tsum(ad.mul(log_ratio, np.asarray(mask, dtype=np.float64)))


def mtpp_losses(model: MTPPModel, batch: Batch, cfg: MTPPTrainConfig, mc_rng: np.random.Generator,
                horizon: float, rng=None) -> dict:
    """Loss terms and metrics for a batch.

    ``ll`` is the Monte-Carlo log-likelihood summed over the batch, ``reg``
    the squared next-time error, ``pred`` the type cross-entropy at the
    predicted time; ``loss = (-ll + a1 reg + a2 pred) / n_events``.
    """
    h = model.encode(batch, rng)
    base = model.head.base(h[:, :-1])                       # (B, N-1, K)
    t_last = batch.times[:, :-1]
    t_next = batch.times[:, 1:]
    mask = batch.interval_mask
    n_events = int(mask.sum())

    def total(t):
        return ad.tsum(model.head(base, t_last, t), axis=-1)

    lam_event = total(t_next[..., None])[..., 0]
    if np.any(lam_event.data[mask] <= 0):
        raise FloatingPointError("non-positive intensity at an event time")
    log_event = ad.log(lam_event)
    comp = mc_compensator(total, t_last, t_next, cfg.mc_samples, mc_rng)
    ll = ad.tsum(ad.mul(log_event - comp, mask.astype(np.float64)))

    t_hat = expected_time(total, t_last, horizon, cfg.horizon_points)   # (B, N-1)
    reg = time_loss(t_hat, t_next, mask)
    lam_k = model.head(base, t_last, t_hat.data[..., None])[..., 0, :]   # (B, N-1, K)
    # gradients reach the type term through the head, not through t_hat
    pred = type_loss(lam_k, batch.types[:, 1:], mask)

    loss = ad.scale(-ll + ad.scale(reg, cfg.alpha_reg) + ad.scale(pred, cfg.alpha_pred),
                    1.0 / max(n_events, 1))
    guess = lam_k.data.argmax(axis=-1)
    correct = int(((guess == batch.types[:, 1:]) & mask).sum())
    sq = float(((t_hat.data - t_next) ** 2)[mask].sum())
    return {"loss": loss, "ll": ll, "reg": reg, "pred": pred, "n_events": n_events,
            "correct": correct, "sq_err": sq}


def mean_gap(seqs: list[EventSequence]) -> float:
    gaps = np.concatenate([np.diff(s.times) for s in seqs])
    return float(gaps.mean())


def evaluate_mtpp(model: MTPPModel, seqs: list[EventSequence], cfg: MTPPTrainConfig,
                  horizon: float, seed: int = 0, chunk: int = 25) -> dict:
    """Per-event log-likelihood, type accuracy and next-time RMSE.  The
    Monte-Carlo draws come from ``seed`` so repeated evaluations match."""
    mc_rng = np.random.default_rng(seed)
    model.train(False)
    totals = {"ll": 0.0, "n": 0, "correct": 0, "sq": 0.0}
    with ad.no_grad():
        for lo in range(0, len(seqs), chunk):
            out = mtpp_losses(model, make_batch(seqs[lo:lo + chunk]), cfg, mc_rng, horizon)
            totals["ll"] += float(out["ll"].item())
            totals["n"] += out["n_events"]
            totals["correct"] += out["correct"]
            totals["sq"] += out["sq_err"]
    n = max(totals["n"], 1)
    result = {"ll": totals["ll"] / n, "rmse": math.sqrt(totals["sq"] / n),
              "events": totals["n"]}
    if model.config.input_dim > 1:
        result["acc"] = totals["correct"] / n
    return result


def train_mtpp(model: MTPPModel, seqs: list[EventSequence], cfg: MTPPTrainConfig,
               batch_rng: np.random.Generator, mc_rng: np.random.Generator, horizon: float,
               dropout_rng=None, log=None) -> list[dict]:
    params = model.named_parameters()
    opt = Adam(lr=cfg.lr)
    history = []
    model.train(True)
    start = time.perf_counter()
    for it in range(1, cfg.iters + 1):
        idx = batch_rng.choice(len(seqs), size=min(cfg.batch, len(seqs)), replace=False)
        out = mtpp_losses(model, make_batch([seqs[i] for i in idx]), cfg, mc_rng, horizon,
                          dropout_rng)
        grads = dict(zip(params, ad.grad(out["loss"], list(params.values()))))
        if cfg.clip > 0:
            clip_grad_norm(grads, cfg.clip)
        opt.step(params, grads)
        if it % cfg.log_every == 0 or it == 1 or it == cfg.iters:
            rec = {"iter": it, "loss": float(out["loss"].item()),
                   "ll_per_event": float(out["ll"].item()) / max(out["n_events"], 1),
                   "elapsed": round(time.perf_counter() - start, 2)}
            history.append(rec)
            if log is not None:
                log(rec)
    model.train(False)
    return history
