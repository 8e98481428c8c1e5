"""Wall-time and NFE scaling of one attention layer against sequence length."""
from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, CTMultiHeadAttention
from .model import MultiHeadAttention
from .ode import NFECounter
from .quadrature import parse_rule


def loglog_slope(lengths, times) -> float:
    """Least-squares slope of log(time) against log(length)."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def _best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_report(lengths=(16, 32, 64, 128), step_sizes=(0.1,), repeats: int = 3,
                 d_model: int = 16, heads: int = 2, quadrature: str = "linear",
                 seed: int = 0) -> dict:
    """Forward-pass timing rows for continuous-time and discrete attention.

    Each row holds the length, step size, the best-of-``repeats`` wall time
    of both layers, their ratio, the NFE of one solver sweep, and a peak
    memory estimate of the batched solver state (MB).
    """
    rows = []
    rng = np.random.default_rng(seed)
    for h in step_sizes:
        cfg = AttentionConfig(heads=heads, rule=parse_rule(quadrature), step_size=h)
        layer = CTMultiHeadAttention(d_model, cfg, np.random.default_rng(seed))
        plain = MultiHeadAttention(d_model, heads, np.random.default_rng(seed))
        for n in lengths:
            x = rng.normal(size=(1, n, d_model))
            t = np.sort(rng.uniform(0.0, 1.0, size=(1, n)))
            t[0, 0], t[0, -1] = 0.0, 1.0
            counter = NFECounter()
            with ad.no_grad():
                layer(x, t, counter=counter)
                nfe = counter.count
                ct = _best_time(lambda: layer(x, t), repeats)
                dt = _best_time(lambda: plain(ad.Tensor(x)), repeats)
            state_mb = n * n * 2 * d_model * 8 * (cfg.rule.size + 5) / 1e6
            rows.append({"length": n, "step_size": h, "ct_seconds": ct, "vanilla_seconds": dt,
                         "ratio": ct / dt, "nfe": nfe, "state_mb": round(state_mb, 3)})
    slopes = {}
    for h in step_sizes:
        sel = [r for r in rows if r["step_size"] == h]
        slopes[str(h)] = {"ct_slope": loglog_slope([r["length"] for r in sel],
                                                   [r["ct_seconds"] for r in sel]),
                          "vanilla_slope": loglog_slope([r["length"] for r in sel],
                                                        [r["vanilla_seconds"] for r in sel])}
    return {"rows": rows, "slopes": slopes}
