"""Two-dimensional spirals: generation, irregular sub-sampling, training of
a ContiFormer or a Transformer baseline, and interpolation/extrapolation
metrics."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..model import ContiFormer, ModelConfig, Transformer, build_model
from ..nn import Linear
from ..ode import NFECounter
from ..optim import Adam, clip_grad_norm

N_POINTS = 150
T_END = 6.0 * math.pi
# the second spiral kind is singular at t = e; placing e one unit past the
# last sample keeps the radius finite
E_OFFSET = 1.0
KINDS = ("counter-clockwise", "clockwise")


def spiral_points(kind: int, a: float, b: float, times) -> np.ndarray:
    """Points of one spiral at ``times``; kind 0 grows outward as
    ``(a + b t)`` at angle ``t``, kind 1 spins the other way with radius
    ``a + 50 b / (e - t)`` at angle ``e - t``."""
    t = np.asarray(times, dtype=np.float64)
    if kind == 0:
        r, ang = a + b * t, t
    elif kind == 1:
        z = T_END + E_OFFSET - t
        r, ang = a + 50.0 * b / z, z
    else:
        raise ValueError(f"spiral kind must be 0 or 1, got {kind}")
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)


def mask_spiral(n_points: int, n_obs: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted, distinct observation indices drawn from the first half."""
    half = n_points // 2
    if n_obs > half:
        raise ValueError(f"cannot observe {n_obs} points from a first half of {half}")
    if n_obs < 1:
        raise ValueError("need at least one observation")
    return np.sort(rng.choice(half, size=n_obs, replace=False))


@dataclass
class SpiralDataset:
    times: np.ndarray          # (T,) shared time grid
    clean: np.ndarray          # (S, T, 2)
    values: np.ndarray         # (S, T, 2): noisy for training spirals, clean for test
    kinds: np.ndarray          # (S,)
    a: np.ndarray
    b: np.ndarray
    observed: np.ndarray       # (S, n_obs) indices into the grid
    n_train: int
    alpha: float = 0.02
    beta: float = 0.1
    seed: int = 0

    @property
    def count(self) -> int:
        return len(self.kinds)

    def indices(self, split: str) -> np.ndarray:
        if split == "train":
            return np.arange(self.n_train)
        if split == "test":
            return np.arange(self.n_train, self.count)
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")

    def to_jsonl(self, path) -> None:
        lines = []
        for s in range(self.count):
            lines.append(json.dumps({
                "times": self.times.tolist(), "values": self.values[s].tolist(),
                "clean": self.clean[s].tolist(), "observed": self.observed[s].tolist(),
                "kind": KINDS[self.kinds[s]], "a": float(self.a[s]), "b": float(self.b[s]),
                "split": "train" if s < self.n_train else "test"}))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "SpiralDataset":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not recs:
            raise ValueError(f"{path} holds no spiral records")
        return cls(times=np.array(recs[0]["times"]),
                   clean=np.array([r["clean"] for r in recs]),
                   values=np.array([r["values"] for r in recs]),
                   kinds=np.array([KINDS.index(r["kind"]) for r in recs]),
                   a=np.array([r["a"] for r in recs]), b=np.array([r["b"] for r in recs]),
                   observed=np.array([r["observed"] for r in recs]),
                   n_train=sum(r["split"] == "train" for r in recs))


def gen_spirals(count: int, alpha: float = 0.02, beta: float = 0.1, seed: int = 0,
                n_train: int | None = None, n_obs: int = 30,
                n_points: int = N_POINTS) -> SpiralDataset:
    """``count`` spirals on ``n_points`` equally spaced times in [0, 6 pi].

    ``a ~ N(0, alpha)``, ``b ~ N(0.3, alpha)`` (standard deviations); the
    first ``n_train`` spirals (default two thirds) get ``N(0, beta)`` noise.
    """
    if count < 2:
        raise ValueError(f"need at least 2 spirals, got {count}")
    rng = np.random.default_rng(seed)
    n_train = (2 * count) // 3 if n_train is None else n_train
    if not 0 < n_train < count:
        raise ValueError(f"n_train must lie in (0, {count}), got {n_train}")
    times = np.linspace(0.0, T_END, n_points)
    kinds = rng.integers(0, 2, size=count)
    a = rng.normal(0.0, alpha, size=count)
    b = rng.normal(0.3, alpha, size=count)
    clean = np.stack([spiral_points(k, ai, bi, times) for k, ai, bi in zip(kinds, a, b)])
    values = clean.copy()
    values[:n_train] += rng.normal(0.0, beta, size=values[:n_train].shape)
    observed = np.stack([mask_spiral(n_points, n_obs, rng) for _ in range(count)])
    return SpiralDataset(times, clean, values, kinds, a, b, observed, n_train, alpha, beta, seed)


def spiral_metrics(pred, truth) -> dict[str, float]:
    """RMSE and MAE over every coordinate of every point."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {truth.shape}")
    err = pred - truth
    return {"rmse": float(np.sqrt(np.mean(err * err))), "mae": float(np.mean(np.abs(err)))}


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class SpiralTrainConfig:
    iters: int = 1500
    batch: int = 32
    lr: float = 1e-2
    query_points: int = 10     # target times sampled per spiral per iteration
    clip: float = 0.0          # global gradient-norm clip (0 disables)
    schedule: str = "constant"  # or "cosine": decay the learning rate to zero
    eval_chunk: int = 10
    log_every: int = 100


class SpiralModel:
    """A sequence model plus a linear read-out to 2-D coordinates."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.net = build_model(config, rng)
        self.head = Linear(config.d_model, 2, rng)

    def named_parameters(self) -> dict:
        params = {f"net.{k}": v for k, v in self.net.named_parameters().items()}
        params.update({f"head.{k}": v for k, v in self.head.named_parameters().items()})
        return params

    def modules(self) -> dict:
        return {"net": self.net, "head": self.head}

    def train(self, mode: bool = True):
        self.net.train(mode)
        self.head.train(mode)

    def predict(self, ds: SpiralDataset, idx: np.ndarray, query: np.ndarray, inputs: np.ndarray,
                scale: float, rng=None, counter: NFECounter | None = None) -> ad.Tensor:
        """Scaled predictions (B, M, 2) at grid indices ``query`` (B, M),
        given the (scaled) input coordinates of each spiral's observed set."""
        obs = ds.observed[idx]
        tgrid = ds.times / ds.times[-1]
        if isinstance(self.net, ContiFormer):
            x = np.take_along_axis(inputs, obs[..., None], axis=1)
            h = self.net(x, tgrid[obs], enc_times=ds.times[obs], query_times=tgrid[query],
                         query_enc_times=ds.times[query], rng=rng, counter=counter)
            return self.head(h)
        nb, n_pts = len(idx), len(ds.times)
        flags = np.zeros((nb, n_pts), dtype=bool)
        np.put_along_axis(flags, obs, True, axis=1)
        x = np.where(flags[..., None], inputs, 0.0)
        grid = np.broadcast_to(tgrid, (nb, n_pts))
        h = self.net(x, grid, enc_times=np.broadcast_to(ds.times, (nb, n_pts)), observed=flags,
                     rng=rng)
        rows = np.arange(nb)[:, None]
        return self.head(h[rows, query])


def spiral_model_config(kind: str, **overrides) -> ModelConfig:
    base = dict(kind=kind, input_dim=2, input="linear", d_model=16, heads=2, layers=1,
                mask_token=(kind == "transformer"))
    base.update(overrides)
    return ModelConfig(**base)


def coordinate_scale(ds: SpiralDataset) -> float:
    """Training-set standard deviation used to bring coordinates to unit scale."""
    return float(ds.values[ds.indices("train")].std())


def learning_rate(base: float, it: int, iters: int, schedule: str = "constant") -> float:
    """Rate for 1-based iteration ``it``: constant, or a half-cosine from
    ``base`` at the first step down to zero after the last."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * (it - 1) / iters))
    raise ValueError(f"unknown schedule {schedule!r}")


def train_spiral(model: SpiralModel, ds: SpiralDataset, cfg: SpiralTrainConfig,
                 batch_rng: np.random.Generator, dropout_rng: np.random.Generator | None = None,
                 log=None) -> list[dict]:
    """Adam on the mean squared error at randomly drawn grid times.

    Inputs are the observed (noisy) points; targets are the noisy training
    trajectories at ``query_points`` random grid times per spiral.
    """
    scale = coordinate_scale(ds)
    train_idx = ds.indices("train")
    inputs_all = ds.values / scale
    params = model.named_parameters()
    opt = Adam(lr=cfg.lr)
    history = []
    model.train(True)
    start = time.perf_counter()
    n_pts = len(ds.times)
    for it in range(1, cfg.iters + 1):
        idx = batch_rng.choice(train_idx, size=min(cfg.batch, len(train_idx)), replace=False)
        query = np.sort(np.stack([batch_rng.choice(n_pts, size=cfg.query_points, replace=False)
                                  for _ in idx]), axis=1)
        pred = model.predict(ds, idx, query, inputs_all[idx], scale, rng=dropout_rng)
        target = np.take_along_axis(inputs_all[idx], query[..., None], axis=1)
        diff = pred - target
        loss = ad.mean(diff * diff)
        grads = ad.grad(loss, list(params.values()))
        gdict = dict(zip(params, grads))
        if cfg.clip > 0:
            clip_grad_norm(gdict, cfg.clip)
        opt.lr = learning_rate(cfg.lr, it, cfg.iters, cfg.schedule)
        opt.step(params, gdict)
        if it % cfg.log_every == 0 or it == 1 or it == cfg.iters:
            rec = {"iter": it, "loss": float(loss.item()),
                   "elapsed": round(time.perf_counter() - start, 2)}
            history.append(rec)
            if log is not None:
                log(rec)
    model.train(False)
    return history


def predict_full(model: SpiralModel, ds: SpiralDataset, split: str = "test",
                 chunk: int = 10) -> np.ndarray:
    """Predictions on the whole grid, in original coordinates (S, T, 2)."""
    scale = coordinate_scale(ds)
    idx_all = ds.indices(split)
    inputs_all = ds.values / scale
    n_pts = len(ds.times)
    out = []
    model.train(False)
    with ad.no_grad():
        for lo in range(0, len(idx_all), chunk):
            idx = idx_all[lo:lo + chunk]
            query = np.broadcast_to(np.arange(n_pts), (len(idx), n_pts))
            out.append(model.predict(ds, idx, query, inputs_all[idx], scale).data * scale)
    return np.concatenate(out, axis=0)


def evaluate_spiral(model: SpiralModel, ds: SpiralDataset, split: str = "test",
                    chunk: int = 10) -> dict:
    """Interpolation metrics on the first half of each grid, extrapolation
    metrics on the second half, both against the noise-free trajectories."""
    pred = predict_full(model, ds, split, chunk)
    truth = ds.clean[ds.indices(split)]
    half = len(ds.times) // 2
    interp = spiral_metrics(pred[:, :half], truth[:, :half])
    extrap = spiral_metrics(pred[:, half:], truth[:, half:])
    return {"interp_rmse": interp["rmse"], "interp_mae": interp["mae"],
            "extrap_rmse": extrap["rmse"], "extrap_mae": extrap["mae"]}
