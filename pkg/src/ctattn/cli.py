"""Command-line driver.

Every subcommand writes ``metrics.json``, ``metrics.csv`` and
``config.snapshot`` into ``--out``; training commands also write a JSON
checkpoint.  Exit status: 0 on success, 2 on configuration errors, 1 on
numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import verify_universal
from .bench import bench_report
from .config import ConfigError, RunConfig, build_config, load_config_file
from .model import config_dict, load_checkpoint, save_checkpoint
from .ode import SolverError
from .optim import NonFiniteGradient
from .quadrature import parse_rule
from .seeding import stream
from .tasks import mtpp as mp
from .tasks import spiral as sp

METRICS_VERSION = 1
NUMERIC_ERRORS = (FloatingPointError, ad.NonFiniteError, SolverError, NonFiniteGradient)

# flag name -> config key, for flags shared by all subcommands
COMMON_FLAGS = {
    "--step-size": ("step_size", float), "--quadrature": ("quadrature", str),
    "--heads": ("heads", int), "--layers": ("layers", int), "--d-model": ("d_model", int),
    "--dropout": ("dropout", float), "--iters": ("iters", int), "--batch": ("batch", int),
    "--lr": ("lr", float), "--out": ("out", str), "--workers": ("workers", int),
    "--model": ("model", str), "--data": ("data", str), "--checkpoint": ("checkpoint", str),
    "--count": ("count", int), "--n-train": ("n_train", int), "--n-obs": ("n_obs", int),
    "--alpha": ("alpha", float), "--beta": ("beta", float),
    "--query-points": ("query_points", int), "--mc-samples": ("mc_samples", int),
    "--n": ("n", int), "--d": ("d", int), "--cases": ("cases", int),
    "--repeats": ("repeats", int), "--activation": ("activation", str),
    "--interp": ("interp", str), "--clip": ("clip", float), "--schedule": ("schedule", str),
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    for flag, (key, kind) in COMMON_FLAGS.items():
        common.add_argument(flag, dest=key, type=str, metavar=kind.__name__.upper())
    common.add_argument("--causal", dest="causal", action="store_const", const="true")
    common.add_argument("--no-normalize", dest="normalize", action="store_const", const="false")
    common.add_argument("--lengths", dest="lengths", metavar="N,N,...")
    common.add_argument("--step-sizes", dest="step_sizes", metavar="H,H,...")
    common.add_argument("--no-recompute", dest="recompute", action="store_const", const="false")

    parser = argparse.ArgumentParser(prog="ctattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-spiral", "generate a spiral dataset"),
        ("train-spiral", "train a model on spirals and evaluate it"),
        ("eval-spiral", "evaluate a spiral checkpoint"),
        ("gen-mtpp", "generate synthetic event sequences"),
        ("train-mtpp", "train an event-sequence model and evaluate it"),
        ("eval-mtpp", "evaluate an event-sequence checkpoint"),
        ("verify-theorem", "reconstruct random score matrices with constructed keys"),
        ("bench", "time attention layers against sequence length"),
    ]:
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    from .config import convert
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {}
    keys = [k for k, _ in COMMON_FLAGS.values()] + ["causal", "normalize", "lengths",
                                                      "step_sizes", "recompute"]
    for key in keys:
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = convert(key, raw)
    # a single --step-size also drives the benchmark sweep
    if "step_size" in overrides and "step_sizes" not in overrides and "step_sizes" not in file_values:
        overrides["step_sizes"] = [overrides["step_size"]]
    return build_config(file_values, overrides, args.seed)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def write_outputs(cfg: RunConfig, command: str, metrics: dict, rows: list[dict]) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"version": METRICS_VERSION, "command": command, "seed": cfg.seed, **metrics}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        if rows:
            keys = list(dict.fromkeys(k for r in rows for k in r))
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)
    (out / "config.snapshot").write_text(cfg.snapshot())
    return out


def _untimed(history: list[dict]) -> list[dict]:
    # wall time goes to the stderr log only, so metrics files stay reproducible
    return [{k: v for k, v in r.items() if k != "elapsed"} for r in history]


def _model_overrides(cfg: RunConfig) -> dict:
    return dict(d_model=cfg.d_model, heads=cfg.heads, layers=cfg.layers, dropout=cfg.dropout,
                step_size=cfg.step_size, quadrature=cfg.quadrature, normalize=cfg.normalize,
                field_norm=cfg.field_norm, activation=cfg.activation, recompute=cfg.recompute)


# ---------------------------------------------------------------------------
# Spirals
# ---------------------------------------------------------------------------

def _spiral_data(cfg: RunConfig) -> sp.SpiralDataset:
    if cfg.data:
        if not Path(cfg.data).is_file():
            raise ConfigError(f"data: file {cfg.data} does not exist")
        return sp.SpiralDataset.from_jsonl(cfg.data)
    seed = int(stream(cfg.seed, "data").integers(2 ** 31))
    return sp.gen_spirals(cfg.count, cfg.alpha, cfg.beta, seed, cfg.n_train, cfg.n_obs)


def cmd_gen_spiral(cfg: RunConfig) -> tuple[dict, list]:
    ds = _spiral_data(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.to_jsonl(out / "spirals.jsonl")
    rows = [{"index": i, "kind": sp.KINDS[k], "a": float(a), "b": float(b),
             "split": "train" if i < ds.n_train else "test"}
            for i, (k, a, b) in enumerate(zip(ds.kinds, ds.a, ds.b))]
    return {"count": ds.count, "n_train": ds.n_train, "file": "spirals.jsonl"}, rows


def cmd_train_spiral(cfg: RunConfig) -> tuple[dict, list]:
    ds = _spiral_data(cfg)
    mcfg = sp.spiral_model_config(cfg.model, **_model_overrides(cfg), interp=cfg.interp)
    model = sp.SpiralModel(mcfg, stream(cfg.seed, "init"))
    tcfg = sp.SpiralTrainConfig(iters=cfg.iters, batch=cfg.batch, lr=cfg.lr,
                                query_points=cfg.query_points, clip=cfg.clip,
                                schedule=cfg.schedule)
    history = sp.train_spiral(model, ds, tcfg, stream(cfg.seed, "batch"),
                              stream(cfg.seed, "dropout"),
                              log=lambda r: print(json.dumps(r), file=sys.stderr))
    metrics = sp.evaluate_spiral(model, ds, "test")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", model.modules(), {"model": config_dict(mcfg),
                    "run": asdict(cfg)}, cfg.seed,
                    extra={"task": "spiral", "scale": sp.coordinate_scale(ds)})
    metrics.update({"model": cfg.model, "final_loss": history[-1]["loss"]})
    return metrics, _untimed(history)


def _load_model(cfg: RunConfig, task: str):
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: a checkpoint path is required")
    if not Path(cfg.checkpoint).is_file():
        raise ConfigError(f"checkpoint: file {cfg.checkpoint} does not exist")
    payload = load_checkpoint(cfg.checkpoint)
    from .model import ModelConfig
    mcfg = ModelConfig.from_dict(payload["config"]["model"])
    cls = sp.SpiralModel if task == "spiral" else mp.MTPPModel
    model = cls(mcfg, np.random.default_rng(0))
    for key, module in model.modules().items():
        module.load_arrays(payload["params"][key])
    return model, payload


def cmd_eval_spiral(cfg: RunConfig) -> tuple[dict, list]:
    model, _ = _load_model(cfg, "spiral")
    ds = _spiral_data(cfg)
    metrics = sp.evaluate_spiral(model, ds, "test")
    return metrics, [metrics]


# ---------------------------------------------------------------------------
# Event sequences
# ---------------------------------------------------------------------------

def _mtpp_data(cfg: RunConfig) -> list[mp.EventSequence]:
    if cfg.data:
        if not Path(cfg.data).is_file():
            raise ConfigError(f"data: file {cfg.data} does not exist")
        return mp.load_sequences(cfg.data)
    if cfg.count > 500:
        raise ConfigError(f"count: at most 500 generator seeds exist, got {cfg.count}")
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(mp.gen_mtpp, range(cfg.count)))
    return mp.gen_mtpp_dataset(cfg.count)


def cmd_gen_mtpp(cfg: RunConfig) -> tuple[dict, list]:
    seqs = _mtpp_data(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    mp.save_sequences(out / "events.jsonl", seqs)
    rows = [{"seed": i, "events": len(s), "last_time": float(s.times[-1])} for i, s in enumerate(seqs)]
    return {"count": len(seqs), "events": int(sum(len(s) for s in seqs)),
            "file": "events.jsonl"}, rows


def _mtpp_split(cfg: RunConfig, seqs):
    if cfg.n_train >= len(seqs):
        raise ConfigError(f"n_train: need fewer than {len(seqs)} sequences, got {cfg.n_train}")
    return seqs[:cfg.n_train], seqs[cfg.n_train:]


def _mtpp_train_config(cfg: RunConfig) -> mp.MTPPTrainConfig:
    return mp.MTPPTrainConfig(iters=cfg.iters, batch=cfg.batch, lr=cfg.lr,
                              mc_samples=cfg.mc_samples, alpha_reg=cfg.alpha_reg,
                              alpha_pred=cfg.alpha_pred, horizon_factor=cfg.horizon_factor,
                              horizon_points=cfg.horizon_points, clip=cfg.clip)


def cmd_train_mtpp(cfg: RunConfig) -> tuple[dict, list]:
    train, test = _mtpp_split(cfg, _mtpp_data(cfg))
    overrides = _model_overrides(cfg)
    overrides["causal"] = True
    overrides["interp"] = "linear"
    mcfg = mp.mtpp_model_config(kind=cfg.model, **overrides)
    model = mp.MTPPModel(mcfg, stream(cfg.seed, "init"))
    tcfg = _mtpp_train_config(cfg)
    horizon = tcfg.horizon_factor * mp.mean_gap(train)
    eval_seed = int(stream(cfg.seed, "mc").integers(2 ** 31))
    before = mp.evaluate_mtpp(model, test, tcfg, horizon, seed=eval_seed)
    history = mp.train_mtpp(model, train, tcfg, stream(cfg.seed, "batch"), stream(cfg.seed, "mc"),
                            horizon, stream(cfg.seed, "dropout"),
                            log=lambda r: print(json.dumps(r), file=sys.stderr))
    after = mp.evaluate_mtpp(model, test, tcfg, horizon, seed=eval_seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", model.modules(), {"model": config_dict(mcfg),
                    "run": asdict(cfg)}, cfg.seed,
                    extra={"task": "mtpp", "horizon": horizon, "eval_seed": eval_seed})
    metrics = {"model": cfg.model, "ll": after["ll"], "rmse": after["rmse"],
               "initial_ll": before["ll"], "improved": after["ll"] > before["ll"]}
    if "acc" in after:
        metrics["acc"] = after["acc"]
    return metrics, _untimed(history)


def cmd_eval_mtpp(cfg: RunConfig) -> tuple[dict, list]:
    model, payload = _load_model(cfg, "mtpp")
    _, test = _mtpp_split(cfg, _mtpp_data(cfg))
    extra = payload["extra"]
    result = mp.evaluate_mtpp(model, test, _mtpp_train_config(cfg), extra["horizon"],
                              seed=extra["eval_seed"])
    return result, [result]


# ---------------------------------------------------------------------------
# Verifier and benchmark
# ---------------------------------------------------------------------------

def cmd_verify(cfg: RunConfig) -> tuple[dict, list]:
    rule = parse_rule(cfg.quadrature)
    reports = verify_universal(cfg.cases, rule, seed=cfg.seed, sizes=(cfg.n,), dims=(cfg.d,))
    worst = max(r["max_error"] for r in reports)
    return {"max_error": worst, "threshold": 1e-3, "passed": worst < 1e-3,
            "quadrature": rule.spec, "n": cfg.n, "d": cfg.d, "cases": cfg.cases}, reports


def cmd_bench(cfg: RunConfig) -> tuple[dict, list]:
    report = bench_report(cfg.lengths, cfg.step_sizes, cfg.repeats, cfg.d_model, cfg.heads,
                          cfg.quadrature, cfg.seed)
    return {"slopes": report["slopes"],
            "nfe": {str(h): sorted({r["nfe"] for r in report["rows"] if r["step_size"] == h})
                    for h in cfg.step_sizes}}, report["rows"]


COMMANDS = {
    "gen-spiral": cmd_gen_spiral, "train-spiral": cmd_train_spiral,
    "eval-spiral": cmd_eval_spiral, "gen-mtpp": cmd_gen_mtpp, "train-mtpp": cmd_train_mtpp,
    "eval-mtpp": cmd_eval_mtpp, "verify-theorem": cmd_verify, "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        metrics, rows = COMMANDS[args.command](cfg)
        out = write_outputs(cfg, args.command, metrics, rows)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"out": str(out), **metrics}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
