"""Run configuration: defaults, a flat ``key = value`` file format, and
command-line overrides.

File grammar, one entry per line::

    # comment
    key = value

Keys use underscores (``step_size``) or dashes (``step-size``).  Booleans
accept true/false/yes/no/1/0; lists are comma separated.  Unknown keys and
malformed values raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .quadrature import parse_rule

SEED_ENV = "CTATTN_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "contiformer"
    seed: int = 0
    step_size: float = 0.1
    quadrature: str = "linear"
    heads: int = 2
    layers: int = 1
    d_model: int = 16
    dropout: float = 0.0
    causal: bool = False
    normalize: bool = True
    field_norm: bool = True
    activation: str = "tanh"
    interp: str = "cubic"
    recompute: bool = True
    iters: int = 1500
    batch: int = 32
    lr: float = 1e-2
    clip: float = 0.0
    schedule: str = "constant"
    out: str = "runs/latest"
    workers: int = 1
    data: str = ""
    checkpoint: str = ""
    # spiral data and training
    count: int = 150
    n_train: int = 0          # 0: two thirds of count
    n_obs: int = 30
    alpha: float = 0.02
    beta: float = 0.1
    query_points: int = 10
    # event sequences
    mc_samples: int = 20
    alpha_reg: float = 0.01
    alpha_pred: float = 1.0
    horizon_factor: float = 10.0
    horizon_points: int = 100
    # theorem verifier
    n: int = 3
    d: int = 2
    cases: int = 10
    # benchmark
    lengths: list = field(default_factory=lambda: [16, 32, 64, 128])
    step_sizes: list = field(default_factory=lambda: [0.1])
    repeats: int = 3

    def validate(self) -> "RunConfig":
        if self.n_train == 0 and self.count >= 2:
            self.n_train = max(1, 2 * self.count // 3)
        positive = ("heads", "layers", "d_model", "iters", "batch", "workers", "count", "n_train",
                    "n_obs", "query_points", "mc_samples", "horizon_points", "n", "d", "cases",
                    "repeats")
        for key in positive:
            if getattr(self, key) < (0 if key == "layers" else 1):
                raise ConfigError(f"{key}: must be positive, got {getattr(self, key)}")
        for key in ("step_size", "lr", "horizon_factor"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: must be > 0, got {getattr(self, key)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout: must lie in [0, 1), got {self.dropout}")
        if self.d_model % self.heads:
            raise ConfigError(f"heads: d_model {self.d_model} is not divisible by {self.heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model: must be even, got {self.d_model}")
        if self.model not in ("contiformer", "transformer"):
            raise ConfigError(f"model: expected contiformer or transformer, got {self.model!r}")
        if self.activation not in ("tanh", "sigmoid"):
            raise ConfigError(f"activation: expected tanh or sigmoid, got {self.activation!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule: expected constant or cosine, got {self.schedule!r}")
        if self.interp not in ("cubic", "linear"):
            raise ConfigError(f"interp: expected cubic or linear, got {self.interp!r}")
        if self.n_obs > 75:
            raise ConfigError(f"n_obs: at most 75 points fit in the first half, got {self.n_obs}")
        if self.n_train >= self.count:
            raise ConfigError(f"n_train: must be below count ({self.count}), got {self.n_train}")
        try:
            parse_rule(self.quadrature)
        except ValueError as exc:
            raise ConfigError(f"quadrature: {exc}") from None
        if len(self.lengths) < 2:
            raise ConfigError("lengths: the benchmark needs at least two lengths")
        if any(n < 2 for n in self.lengths):
            raise ConfigError(f"lengths: every length must be >= 2, got {self.lengths}")
        if any(h <= 0 for h in self.step_sizes):
            raise ConfigError(f"step_sizes: must be positive, got {self.step_sizes}")
        return self

    def snapshot(self) -> str:
        """Config file text that reproduces this run."""
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f for f in fields(RunConfig)}
_LIST_ITEM = {"lengths": int, "step_sizes": float}


def _default_type(name: str):
    default = RunConfig()
    return type(getattr(default, name))


def convert(key: str, raw: Any) -> Any:
    """Convert a raw (string) value for ``key`` to its configured type."""
    name = key.replace("-", "_")
    if name not in _TYPES:
        raise ConfigError(f"{key}: unknown config key")
    kind = _default_type(name)
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is list:
            return [_LIST_ITEM[name](p) for p in text.split(",") if p.strip()]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        values[key.replace("-", "_")] = convert(key, value)
    return values


def load_config_file(path) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file {path} does not exist")
    return parse_config_text(p.read_text(), str(path))


def build_config(file_values: dict[str, Any] | None = None,
                 overrides: dict[str, Any] | None = None, seed_flag: int | None = None) -> RunConfig:
    """Defaults, then the config file, then flag overrides.  The seed comes
    from ``--seed``, else the file, else ``$CTATTN_SEED``, else 0."""
    merged: dict[str, Any] = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and env_seed.strip():
        merged["seed"] = convert("seed", env_seed)
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if seed_flag is not None:
        merged["seed"] = seed_flag
    for key in merged:
        if key not in _TYPES:
            raise ConfigError(f"{key}: unknown config key")
    return RunConfig(**merged).validate()
