"""Command-line entry point: ``mat-forecast <command> [flags]``.

Configuration is a flat mapping of dotted keys (``model.n1``, ``train.lr``...).
Values are resolved as defaults < ``--config`` JSON file < command-line flags;
``MAT_SEED`` supplies the seed when neither the file nor a flag sets it.
Every command writes its fully resolved config to ``<out>/config.json``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    Scaler,
    apply_scaler,
    chronological_split,
    load_cache,
    load_csv,
    prepare,
    save_cache,
    windows,
)
from .errors import ConfigError, DataError, MatError, VerificationError
from .model import MatModel, ModelConfig
from .ssm import scan_recurrence
from .training import (
    LinearBaseline,
    MetricsReport,
    TrainConfig,
    TrainingAborted,
    naive_repeat_forecast,
    predict,
    score,
    train,
    write_csv,
)
from .verify import run_gradient_suite

COMMANDS = ("train", "evaluate", "forecast", "gradcheck", "scan-bench", "ingest")

DEFAULTS: dict[str, object] = {
    "data.path": None,
    "data.split": [0.7, 0.1, 0.2],
    "data.time_column": None,
    "data.impute": "ffill",
    "model.L": 96,
    "model.T": 96,
    "model.n1": 256,
    "model.n2": 128,
    "model.D": 256,
    "model.N": 1,
    "model.H": 8,
    "model.conv_width": 2,
    "model.dropout": 0.1,
    "model.revin_affine": True,
    "model.revin_eps": 1e-5,
    "model.positional": False,
    "model.block_order": "mamba_first",
    "model.emb_depth": 1,
    "model.scan": "parallel",
    "model.score_scale": "head",
    "train.epochs": 100,
    "train.batch_size": 32,
    "train.lr": 1e-4,
    "train.seed": None,
    "train.patience": None,
    "train.metrics_space": "scaled",
    "train.grad_clip": None,
    "train.lr_decay": 1.0,
    "train.workers": 1,
    "train.eval_batch_size": 256,
    "out.dir": "runs/latest",
    "run.checkpoint": None,
    "forecast.origin": None,
    "bench.lengths": [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024],
    "bench.lanes": 16,
    "bench.state": 1,
    "bench.repeats": 3,
    "gradcheck.seed": 0,
}

# flag -> (config key, type)
FLAGS = {
    "--data": ("data.path", str),
    "--lookback": ("model.L", int),
    "--horizon": ("model.T", int),
    "--n1": ("model.n1", int),
    "--n2": ("model.n2", int),
    "--dim": ("model.D", int),
    "--state": ("model.N", int),
    "--heads": ("model.H", int),
    "--dropout": ("model.dropout", float),
    "--epochs": ("train.epochs", int),
    "--batch": ("train.batch_size", int),
    "--lr": ("train.lr", float),
    "--seed": ("train.seed", int),
    "--out": ("out.dir", str),
    "--metrics-space": ("train.metrics_space", str),
    "--workers": ("train.workers", int),
    "--checkpoint": ("run.checkpoint", str),
    "--origin": ("forecast.origin", int),
}


def _check_type(key: str, value):
    default = DEFAULTS[key]
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
    elif isinstance(default, int) or key in ("train.seed", "train.patience", "forecast.origin"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
    elif isinstance(default, float) or key == "train.grad_clip":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
    elif not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def resolve_config(config_path: str | None, overrides: dict[str, object], env=None) -> dict:
    """Merge defaults, the JSON file and flag overrides; reject unknown keys."""
    env = os.environ if env is None else env
    cfg = dict(DEFAULTS)
    file_cfg: dict = {}
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{config_path}: top level must be an object of dotted keys")
    for source in (file_cfg, overrides):
        unknown = sorted(set(source) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in source.items():
            cfg[key] = _check_type(key, value)
    if cfg["train.seed"] is None:
        seed = env.get("MAT_SEED")
        try:
            cfg["train.seed"] = int(seed) if seed is not None else 0
        except ValueError:
            raise ConfigError(f"MAT_SEED must be an integer, got {seed!r}") from None
    return cfg


def model_config(cfg: dict, M: int) -> ModelConfig:
    fields = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.")}
    return ModelConfig(M=M, seed=cfg["train.seed"], **fields).validate()


def train_config(cfg: dict) -> TrainConfig:
    fields = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.")}
    return TrainConfig(**fields).validate()


def _load_dataset(cfg: dict):
    path = cfg["data.path"]
    if not path:
        raise ConfigError("no dataset given (use --data or data.path)")
    if str(path).endswith(".json"):
        return load_cache(path)
    return load_csv(path, time_column=cfg["data.time_column"], impute=cfg["data.impute"])


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: dict, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _checkpoint_stem(cfg: dict) -> Path:
    return Path(cfg["run.checkpoint"] or Path(cfg["out.dir"]) / "model")


def _load_checkpoint(cfg: dict) -> tuple[MatModel, Scaler, dict]:
    model, extra, meta = MatModel.load(_checkpoint_stem(cfg))
    if "scaler.mean" not in extra:
        raise DataError("checkpoint has no scaler statistics")
    return model, Scaler(extra["scaler.mean"], extra["scaler.std"]), meta


# -- commands ---------------------------------------------------------------------------------


def cmd_train(cfg: dict) -> int:
    ds = _load_dataset(cfg)
    mcfg = model_config(cfg, ds.n_channels)
    tcfg = train_config(cfg)
    out = _out_dir(cfg)
    _echo(cfg, out)
    data = prepare(ds, mcfg.L, mcfg.T, cfg["data.split"])
    model = MatModel.create(mcfg)
    extra = {"scaler.mean": data.scaler.mean, "scaler.std": data.scaler.std}
    meta = {"channels": ds.channel_names, "dataset": ds.name}

    def log(epoch, tr, va):
        va_text = f" val_mse={va:.6f}" if va is not None else ""
        print(f"epoch {epoch + 1}/{tcfg.epochs} train_loss={tr:.6f}{va_text}", file=sys.stderr)

    try:
        model, report = train(model, data, tcfg, log=log)
    except TrainingAborted as exc:
        model.load_state_dict(exc.last_good)
        model.save(out / "model", extra, {**meta, "aborted_at_epoch": exc.epoch})
        raise
    model.save(out / "model", extra, meta)
    report.to_json(out / "metrics.json")
    write_csv(out / "metrics.csv", MetricsReport.CSV_FIELDS, [report.csv_row()])
    curve = [
        {"epoch": i + 1, "train_loss": tr, "val_mse": report.val_curve[i] if i < len(report.val_curve) else ""}
        for i, tr in enumerate(report.train_curve)
    ]
    write_csv(out / "loss_curve.csv", ("epoch", "train_loss", "val_mse"), curve)
    print(f"test mse={report.mse:.6f} mae={report.mae:.6f} ({report.metrics_space})")
    return 0


EVAL_FIELDS = ("dataset", "lookback", "horizon", "metrics_space", "method", "mse", "mae")


def cmd_evaluate(cfg: dict) -> int:
    model, scaler, meta = _load_checkpoint(cfg)
    ds = _load_dataset(cfg)
    mcfg = model.config
    if ds.n_channels != mcfg.M:
        raise DataError(f"dataset has {ds.n_channels} channels, checkpoint expects {mcfg.M}")
    tcfg = train_config(cfg)
    out = _out_dir(cfg)
    _echo(cfg, out)
    parts = chronological_split(ds, cfg["data.split"], min_length=mcfg.L + mcfg.T)
    train_ws = windows(apply_scaler(parts[0], scaler), mcfg.L, mcfg.T)
    target = windows(apply_scaler(parts[2] if len(parts[2]) else parts[1], scaler), mcfg.L, mcfg.T)
    space = tcfg.metrics_space
    preds = {
        "mat": predict(model, target.x, tcfg.eval_batch_size),
        "naive": naive_repeat_forecast(target.x, mcfg.T),
        "linear": LinearBaseline().fit(train_ws, tcfg).predict(target.x),
        "linear_lstsq": LinearBaseline().fit_lstsq(train_ws).predict(target.x),
    }
    rows, step_rows = [], []
    for method, pred in preds.items():
        s = score(pred, target.y, scaler, space)
        for k in range(mcfg.T):
            sk = score(pred[..., k : k + 1], target.y[..., k : k + 1], scaler, space)
            step_rows.append({"method": method, "step": k + 1, "mse": sk["mse"], "mae": sk["mae"]})
        rows.append(
            {
                "dataset": ds.name,
                "lookback": mcfg.L,
                "horizon": mcfg.T,
                "metrics_space": space,
                "method": method,
                "mse": s["mse"],
                "mae": s["mae"],
            }
        )
        print(f"{method:>12}  mse={s['mse']:.6f}  mae={s['mae']:.6f}")
    write_csv(out / "eval_metrics.csv", EVAL_FIELDS, rows)
    write_csv(out / "eval_by_step.csv", ("method", "step", "mse", "mae"), step_rows)
    return 0


def cmd_forecast(cfg: dict) -> int:
    model, scaler, meta = _load_checkpoint(cfg)
    ds = _load_dataset(cfg)
    mcfg = model.config
    origin = cfg["forecast.origin"]
    if origin is None:
        origin = len(ds) - mcfg.L
    if origin < 0 or origin + mcfg.L > len(ds):
        raise DataError(f"origin {origin} leaves no full look-back window in {len(ds)} steps")
    out = _out_dir(cfg)
    _echo(cfg, out)
    x = scaler.transform(ds.values[:, origin : origin + mcfg.L])
    y = scaler.inverse(predict(model, x[None])[0])
    rows = [
        {"channel": name, **{f"t+{k + 1}": float(y[m, k]) for k in range(mcfg.T)}}
        for m, name in enumerate(ds.channel_names)
    ]
    write_csv(out / "forecast.csv", ["channel"] + [f"t+{k + 1}" for k in range(mcfg.T)], rows)
    print(f"wrote {mcfg.M}x{mcfg.T} forecast from origin {origin} to {out / 'forecast.csv'}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo(cfg, out)
    results = run_gradient_suite(seed=cfg["gradcheck.seed"])
    for r in results:
        print(r.line())
    write_csv(
        out / "gradcheck.csv",
        ("check", "max_rel_error", "tolerance", "passed"),
        [{"check": r.name, "max_rel_error": r.error, "tolerance": r.tol, "passed": r.passed} for r in results],
    )
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_scan_bench(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo(cfg, out)
    rng = np.random.default_rng(cfg["train.seed"])
    rows = []
    for length in cfg["bench.lengths"]:
        shape = (int(length), cfg["bench.lanes"], cfg["bench.state"])
        a = rng.uniform(0.5, 1.0, shape)
        b = rng.standard_normal(shape)
        for path in ("sequential", "parallel"):
            best = np.inf
            for _ in range(cfg["bench.repeats"]):
                t0 = time.perf_counter_ns()
                scan_recurrence(a, b, path)
                best = min(best, time.perf_counter_ns() - t0)
            rows.append({"length": int(length), "path": path, "ns_per_step": best / length})
            print(f"length={length:>6} {path:>10} {best / length:12.1f} ns/step")
    write_csv(out / "scan_bench.csv", ("length", "path", "ns_per_step"), rows)
    return 0


def cmd_ingest(cfg: dict) -> int:
    ds = _load_dataset(cfg)
    out = _out_dir(cfg)
    _echo(cfg, out)
    save_cache(ds, out / "dataset")
    print(f"{ds.name}: {ds.n_channels} channels, {len(ds)} steps, {ds.timestamps[0]} .. {ds.timestamps[-1]}")
    for name, row in zip(ds.channel_names, ds.values):
        print(f"  {name:<24} mean={row.mean():12.4f} std={row.std():12.4f} min={row.min():12.4f} max={row.max():12.4f}")
    return 0


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "gradcheck": cmd_gradcheck,
    "scan-bench": cmd_scan_bench,
    "ingest": cmd_ingest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mat-forecast", description="MAT hybrid Mamba/attention forecaster")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file of dotted config keys")
    for flag, (key, typ) in FLAGS.items():
        parser.add_argument(flag, type=typ, dest=key.replace(".", "__"), help=f"sets {key}")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {}
        for flag, (key, _) in FLAGS.items():
            value = getattr(args, key.replace(".", "__"))
            if value is not None:
                overrides[key] = value
        cfg = resolve_config(args.config, overrides)
        return HANDLERS[args.command](cfg)
    except MatError as exc:
        _report(type(exc).__name__, exc.exit_code, str(exc))
        return exc.exit_code
    except MemoryError as exc:
        _report("MemoryError", 4, str(exc))
        return 4


def _report(kind: str, code: int, message: str) -> None:
    line = json.dumps({"error": kind, "exit_code": code, "message": " ".join(message.split())})
    print(line, file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
