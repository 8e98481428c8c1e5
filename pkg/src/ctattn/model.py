"""ContiFormer layers and models, a discrete Transformer baseline, and
JSON checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, CTMultiHeadAttention, _apply_basis, query_basis
from .autodiff import Tensor
from .nn import FeedForward, LayerNorm, Linear, Module, xavier
from .ode import NFECounter
from .quadrature import parse_rule

CHECKPOINT_FORMAT = "ctattn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    kind: str = "contiformer"        # or "transformer"
    input_dim: int = 2               # value width, or number of event types for "categorical"
    input: str = "linear"            # "linear" | "categorical"
    d_model: int = 16
    heads: int = 2
    layers: int = 1
    ffn_mult: int = 4
    dropout: float = 0.0
    activation: str = "tanh"         # FFN and vector-field activation
    field_norm: bool = True
    shared_field: bool = False
    zero_field: bool = False
    causal: bool = False
    normalize: bool = True
    quadrature: str = "linear"
    step_size: float = 0.1
    interp: str = "cubic"
    recompute: bool = True           # recompute solver stages during backward (saves memory)
    mask_token: bool = False         # transformer baseline: learnable token for unseen inputs

    def __post_init__(self):
        for name in ("d_model", "heads", "ffn_mult", "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the temporal encoding")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.kind not in ("contiformer", "transformer"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input not in ("linear", "categorical"):
            raise ValueError(f"unknown input kind {self.input!r}")

    def attention(self) -> AttentionConfig:
        return AttentionConfig(heads=self.heads, causal=self.causal, normalize=self.normalize,
                               rule=parse_rule(self.quadrature), step_size=self.step_size,
                               interp=self.interp, recompute=self.recompute)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def temporal_encoding(times, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: column 2k is ``sin(t / 10000^(2k/d))`` and
    column 2k+1 the matching cosine.  Works on any shape of ``times``."""
    if d_model % 2:
        raise ValueError(f"temporal encoding needs an even width, got {d_model}")
    t = np.asarray(times, dtype=np.float64)[..., None]
    freq = 1.0 / 10000.0 ** (np.arange(0, d_model, 2) / d_model)
    out = np.empty(t.shape[:-1] + (d_model,))
    out[..., 0::2] = np.sin(t * freq)
    out[..., 1::2] = np.cos(t * freq)
    return out


class InputEmbedding(Module):
    """``Linear(x) + enc(t)`` for real values or ``emb(k) + enc(t)`` for types."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.kind = config.input
        self.d_model = config.d_model
        if config.input == "linear":
            self.proj = Linear(config.input_dim, config.d_model, rng)
        else:
            self.table = Tensor(rng.normal(0.0, 1.0 / math.sqrt(config.d_model),
                                           size=(config.input_dim, config.d_model)),
                                requires_grad=True)

    def values(self, x) -> Tensor:
        """Embedding of the observation values alone (no time term)."""
        if self.kind == "linear":
            return self.proj(ad.as_tensor(x))
        return self.table[np.asarray(x, dtype=np.int64)]

    def __call__(self, x, enc_times) -> Tensor:
        return self.values(x) + temporal_encoding(enc_times, self.d_model)


def _dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    return ad.dropout(x, rate, rng, training and rng is not None)


class ContiFormerLayer(Module):
    """``z~ = LN(CT-MHA(t) + x(t))``, ``z = LN(FFN(z~) + z~)``, where ``x(t)``
    is the spline through the layer input.  Evaluating at arbitrary
    ``query_times`` gives the layer's continuous output."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.attn = CTMultiHeadAttention(config.d_model, config.attention(), rng,
                                         field_norm=config.field_norm,
                                         field_activation=config.activation,
                                         shared_field=config.shared_field,
                                         zero_field=config.zero_field)
        self.norm1 = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.ffn_mult * config.d_model, rng,
                               config.activation)
        self.norm2 = LayerNorm(config.d_model)
        self.rate = config.dropout
        self.interp = config.interp

    def __call__(self, x: Tensor, times, query_times=None, lengths=None, rng=None,
                 counter: NFECounter | None = None, resid: Tensor | None = None) -> Tensor:
        attn = self.attn(x, times, query_times, lengths, counter)
        if resid is None:
            resid = x if query_times is None else self.continuous_input(x, times, query_times, lengths)
        z = self.norm1(_dropout(attn, self.rate, rng, self.training) + resid)
        return self.norm2(_dropout(self.ffn(z), self.rate, rng, self.training) + z)

    def continuous_input(self, x: Tensor, times, query_times, lengths=None) -> Tensor:
        """The spline through the layer input, evaluated at ``query_times``."""
        return _apply_basis(query_basis(times, lengths, query_times, self.interp), x)


def _sort_batch(times: np.ndarray, lengths):
    """Per-row order putting valid entries in increasing time (pads last)."""
    nb, n = times.shape
    key = times.copy()
    if lengths is not None:
        key[np.arange(n)[None, :] >= np.asarray(lengths)[:, None]] = np.inf
    order = np.argsort(key, axis=1, kind="stable")
    identity = np.all(order == np.arange(n))
    return order, identity


class ContiFormer(Module):
    """Input embedding followed by ``layers`` ContiFormer layers.

    Every layer but the last is sampled at the input times; the last is
    sampled at ``query_times`` when given.  For the first layer the
    continuous input at a query time is the spline through the value
    embeddings plus the temporal encoding of the query time itself
    (``query_enc_times``, defaulting to ``query_times``).  Inputs are sorted
    by time internally and outputs returned in the caller's order.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.embed = InputEmbedding(config, rng)
        self.layers = [ContiFormerLayer(config, rng) for _ in range(config.layers)]

    def __call__(self, x, times, enc_times=None, query_times=None, lengths=None, rng=None,
                 counter: NFECounter | None = None, query_enc_times=None) -> Tensor:
        categorical = self.config.input == "categorical"
        times = np.asarray(times, dtype=np.float64)
        squeeze = times.ndim == 1
        if squeeze:
            times = times[None]
            x = np.asarray(x)[None] if categorical else ad.as_tensor(x)[None]
            enc_times = None if enc_times is None else np.asarray(enc_times)[None]
            query_times = None if query_times is None else np.asarray(query_times)[None]
            query_enc_times = None if query_enc_times is None else np.asarray(query_enc_times)[None]
        enc_times = times if enc_times is None else np.asarray(enc_times, dtype=np.float64)
        order, identity = _sort_batch(times, lengths)
        rows = np.arange(times.shape[0])[:, None]
        if not identity:
            times, enc_times = times[rows, order], enc_times[rows, order]
            x = np.asarray(x)[rows, order] if categorical else ad.as_tensor(x)[rows, order]
        values = self.embed.values(x)
        h = values + temporal_encoding(enc_times, self.config.d_model)
        for li, layer in enumerate(self.layers):
            last = li == len(self.layers) - 1
            resid = None
            if last and query_times is not None:
                resid = layer.continuous_input(h if li else values, times, query_times, lengths)
                if li == 0:
                    qenc = query_times if query_enc_times is None else query_enc_times
                    resid = resid + temporal_encoding(qenc, self.config.d_model)
            h = layer(h, times, query_times if last else None, lengths, rng, counter, resid)
        if not identity and (query_times is None or not self.layers):
            h = h[rows, np.argsort(order, axis=1)]
        return h[0] if squeeze else h


class MultiHeadAttention(Module):
    """Discrete scaled dot-product multi-head self-attention."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.wq = Tensor(xavier(rng, width, width), requires_grad=True)
        self.wk = Tensor(xavier(rng, width, width), requires_grad=True)
        self.wv = Tensor(xavier(rng, width, width), requires_grad=True)
        self.wo = Tensor(xavier(rng, width, width), requires_grad=True)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        nb, n, d = x.shape
        hd = d // self.heads

        def split(w):
            return ad.transpose(ad.matmul(x, w).reshape(nb, n, self.heads, hd), (0, 2, 1, 3))

        q, k, v = split(self.wq), split(self.wk), split(self.wv)
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
        weights = ad.softmax(scores, axis=-1, mask=mask)
        out = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)).reshape(nb, n, d)
        return ad.matmul(out, self.wo)


class TransformerLayer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(config.d_model, config.heads, rng)
        self.norm1 = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.ffn_mult * config.d_model, rng,
                               config.activation)
        self.norm2 = LayerNorm(config.d_model)
        self.rate = config.dropout

    def __call__(self, x: Tensor, mask=None, rng=None) -> Tensor:
        z = self.norm1(_dropout(self.attn(x, mask), self.rate, rng, self.training) + x)
        return self.norm2(_dropout(self.ffn(z), self.rate, rng, self.training) + z)


class Transformer(Module):
    """Discrete baseline with the same layer layout as :class:`ContiFormer`.

    With ``mask_token`` enabled, positions flagged unobserved receive a
    learnable token (plus their temporal encoding) instead of an embedded
    value, so the model can be queried on a full time grid.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.embed = InputEmbedding(config, rng)
        self.layers = [TransformerLayer(config, rng) for _ in range(config.layers)]
        if config.mask_token:
            self.token = Tensor(rng.normal(0.0, 0.1, size=config.d_model), requires_grad=True)

    def __call__(self, x, times, enc_times=None, observed=None, lengths=None, rng=None,
                 counter=None) -> Tensor:
        times = np.asarray(times, dtype=np.float64)
        squeeze = times.ndim == 1
        if squeeze:
            times = times[None]
            x = ad.as_tensor(x)[None] if self.config.input == "linear" else np.asarray(x)[None]
            enc_times = None if enc_times is None else np.asarray(enc_times)[None]
            observed = None if observed is None else np.asarray(observed)[None]
        enc_times = times if enc_times is None else np.asarray(enc_times, dtype=np.float64)
        h = self.embed(x, enc_times)
        if observed is not None:
            if not self.config.mask_token:
                raise ValueError("observed flags need a model built with mask_token=True")
            obs = np.asarray(observed, dtype=bool)[..., None]
            h = ad.where(np.broadcast_to(obs, h.shape), h,
                         ad.broadcast_to(self.token, h.shape) + temporal_encoding(enc_times, h.shape[-1]))
        nb, n = times.shape
        mask = np.ones((nb, 1, n, n), dtype=bool)
        if lengths is not None:
            valid = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
            mask &= valid[:, None, None, :]
        if self.config.causal:
            mask &= (times[:, None, :] <= times[:, :, None])[:, None]
        for layer in self.layers:
            h = layer(h, mask, rng)
        return h[0] if squeeze else h


def build_model(config: ModelConfig, rng: np.random.Generator) -> Module:
    return ContiFormer(config, rng) if config.kind == "contiformer" else Transformer(config, rng)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _encode(value):
    if isinstance(value, np.ndarray):
        return {"shape": list(value.shape), "data": value.reshape(-1).tolist()}
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    return value


def _decode_array(entry) -> np.ndarray:
    return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])


def save_checkpoint(path, modules: dict[str, Module], config: dict, seed: int,
                    optimizer=None, extra: dict | None = None) -> None:
    """JSON layout::

        {"format": "ctattn-checkpoint", "version": 1, "seed": int,
         "config": {...}, "params": {module: {name: {"shape", "data"}}},
         "optimizer": {...} | null, "extra": {...}}

    Floats are written with ``repr`` precision, so reloads are exact.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "config": config,
        "params": {key: {n: _encode(p.data) for n, p in m.named_parameters().items()}
                   for key, m in modules.items()},
        "optimizer": None if optimizer is None else _encode(optimizer.state_dict()),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    payload["params"] = {key: {n: _decode_array(e) for n, e in arrays.items()}
                         for key, arrays in payload["params"].items()}
    opt = payload.get("optimizer")
    if opt is not None:
        for slot in ("m", "v"):
            if slot in opt:
                opt[slot] = {k: _decode_array(e) for k, e in opt[slot].items()}
    return payload


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
