"""Named random sub-streams derived from a single integer seed."""
from __future__ import annotations

import numpy as np

STREAMS = ("data", "init", "dropout", "mc", "batch")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for sub-stream ``name``; independent of the other streams
    and of the order in which they are requested."""
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}; expected one of {STREAMS}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS.index(name)]))


def streams(seed: int) -> dict[str, np.random.Generator]:
    return {name: stream(seed, name) for name in STREAMS}
