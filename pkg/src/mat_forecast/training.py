"""Adam training of MAT with an L2 objective, evaluation, and reference baselines."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PreparedData, Scaler, WindowSet, batches
from .errors import ConfigError, DataError, NumericError
from .model import MatModel, _map_tensors

# -- metrics ------------------------------------------------------------------------------------


def _check_same(pred, target):
    if np.shape(pred) != np.shape(target):
        raise ConfigError(f"metric shapes differ: {np.shape(pred)} vs {np.shape(target)}")


def mse(pred, target) -> float:
    _check_same(pred, target)
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


def mae(pred, target) -> float:
    _check_same(pred, target)
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target))))


def mse_loss(pred: Tensor, target) -> Tensor:
    """The L2 training objective: mean squared error over every element."""
    target = ad.as_tensor(target)
    _check_same(pred.data, target.data)
    d = pred - target
    return ad.mean(d * d)


# -- Adam --------------------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(grads) != len(params):
        raise ConfigError(f"{len(grads)} gradients for {len(params)} parameters")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {label}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: list[np.ndarray | None], max_norm: float) -> list[np.ndarray | None]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return [None if g is None else g * factor for g in grads]


# -- baselines ------------------------------------------------------------------------------------


def naive_repeat_forecast(x: np.ndarray, T: int) -> np.ndarray:
    """Repeat each channel's last look-back value T times."""
    return np.repeat(x[..., -1:], T, axis=-1)


# -- training -----------------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    patience: int | None = None
    metrics_space: str = "scaled"
    grad_clip: float | None = None
    lr_decay: float = 1.0  # per-epoch multiplicative factor; 1.0 keeps a constant rate
    workers: int = 1
    eval_batch_size: int = 256

    def validate(self) -> TrainConfig:
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs, batch_size, workers and eval_batch_size must be positive")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be positive when set")
        if self.metrics_space not in ("scaled", "raw"):
            raise ConfigError("metrics_space must be 'scaled' or 'raw'")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        return self


@dataclass
class LinearBaseline:
    """One L -> T affine map shared by all channels.

    :meth:`fit` trains it with Adam under a :class:`TrainConfig` (same loss,
    batching and seed handling as the main model); :meth:`fit_lstsq` solves the
    least-squares problem in closed form.
    """

    weight: np.ndarray | None = None  # (L, T)
    bias: np.ndarray | None = None  # (T,)

    def fit(self, ws: WindowSet, cfg: TrainConfig) -> LinearBaseline:
        cfg.validate()
        L, T = ws.x.shape[-1], ws.y.shape[-1]
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
        bound = L**-0.5
        w = Tensor(rng.uniform(-bound, bound, (L, T)), requires_grad=True)
        b = Tensor(rng.uniform(-bound, bound, T), requires_grad=True)
        opt = AdamState(lr=cfg.lr)
        for epoch in range(cfg.epochs):
            opt.lr = cfg.lr * cfg.lr_decay**epoch
            for batch in batches(ws, cfg.batch_size, shuffle=True, seed=rng):
                w.grad = b.grad = None
                ad.backward(mse_loss(Tensor(batch.x) @ w + b, batch.y))
                adam_step([w, b], [w.grad, b.grad], opt, names=["linear.weight", "linear.bias"])
        self.weight, self.bias = w.data, b.data
        return self

    def fit_lstsq(self, ws: WindowSet, chunk: int = 4096) -> LinearBaseline:
        n, M, L = ws.x.shape
        T = ws.y.shape[-1]
        if n * M <= 200_000:
            X = np.concatenate([ws.x.reshape(n * M, L), np.ones((n * M, 1))], axis=1)
            sol = np.linalg.lstsq(X, ws.y.reshape(n * M, T), rcond=None)[0]
        else:
            xtx = np.zeros((L + 1, L + 1))
            xty = np.zeros((L + 1, T))
            for start in range(0, n, chunk):
                xb = ws.x[start : start + chunk].reshape(-1, L)
                X = np.concatenate([xb, np.ones((len(xb), 1))], axis=1)
                xtx += X.T @ X
                xty += X.T @ ws.y[start : start + chunk].reshape(-1, T)
            sol = np.linalg.pinv(xtx) @ xty
        self.weight, self.bias = sol[:L], sol[L]
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.weight is None:
            raise ConfigError("LinearBaseline used before fit")
        return x @ self.weight + self.bias


@dataclass
class MetricsReport:
    dataset: str
    lookback: int
    horizon: int
    mse: float
    mae: float
    metrics_space: str = "scaled"
    baselines: dict[str, dict[str, float]] = field(default_factory=dict)
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    epochs_run: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    CSV_FIELDS = (
        "dataset", "lookback", "horizon", "metrics_space", "mse", "mae",
        "naive_mse", "naive_mae", "linear_mse", "linear_mae",
        "linear_lstsq_mse", "linear_lstsq_mae", "epochs_run", "seed",
    )  # fmt: skip

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def csv_row(self) -> dict[str, object]:
        b = self.baselines
        return {
            "dataset": self.dataset,
            "lookback": self.lookback,
            "horizon": self.horizon,
            "metrics_space": self.metrics_space,
            "mse": self.mse,
            "mae": self.mae,
            "naive_mse": b.get("naive", {}).get("mse", ""),
            "naive_mae": b.get("naive", {}).get("mae", ""),
            "linear_mse": b.get("linear", {}).get("mse", ""),
            "linear_mae": b.get("linear", {}).get("mae", ""),
            "linear_lstsq_mse": b.get("linear_lstsq", {}).get("mse", ""),
            "linear_lstsq_mae": b.get("linear_lstsq", {}).get("mae", ""),
            "epochs_run": self.epochs_run,
            "seed": self.seed,
        }


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    """CSV with LF endings and repr-formatted floats (locale independent)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fieldnames)
    for row in rows:
        w.writerow([format_value(row[k]) for k in fieldnames])
    Path(path).write_text(buf.getvalue())


def predict(model: MatModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode forecasts for a stack of windows, without recording a graph."""
    frozen = model.frozen()
    outs = [frozen(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,) + x.shape[1:-1] + (model.config.T,))


def _to_space(arr: np.ndarray, scaler: Scaler | None, space: str) -> np.ndarray:
    if space == "raw":
        if scaler is None:
            raise ConfigError("raw metrics need the dataset scaler")
        return scaler.inverse(arr)
    return arr


def score(pred, target, scaler: Scaler | None = None, space: str = "scaled") -> dict[str, float]:
    p = _to_space(pred, scaler, space)
    t = _to_space(target, scaler, space)
    return {"mse": mse(p, t), "mae": mae(p, t)}


def evaluate(
    model: MatModel,
    ws: WindowSet,
    cfg: TrainConfig | None = None,
    scaler: Scaler | None = None,
) -> dict[str, float]:
    """MSE/MAE of the model on ``ws``; pure function of its inputs."""
    cfg = cfg or TrainConfig()
    if ws is None or len(ws) == 0:
        raise DataError("cannot evaluate on an empty split")
    return score(predict(model, ws.x, cfg.eval_batch_size), ws.y, scaler, cfg.metrics_space)


def baseline_scores(
    data: PreparedData, ws: WindowSet, cfg: TrainConfig
) -> dict[str, dict[str, float]]:
    """Naive-repeat, Adam-trained linear (same budget as ``cfg``) and least-squares linear."""
    T = ws.y.shape[-1]
    space = cfg.metrics_space
    linear = LinearBaseline().fit(data.train, cfg)
    exact = LinearBaseline().fit_lstsq(data.train)
    return {
        "naive": score(naive_repeat_forecast(ws.x, T), ws.y, data.scaler, space),
        "linear": score(linear.predict(ws.x), ws.y, data.scaler, space),
        "linear_lstsq": score(exact.predict(ws.x), ws.y, data.scaler, space),
    }


def _worker_grads(model: MatModel, xb, yb, weight, train_rng) -> tuple[float, list[np.ndarray]]:
    params = _map_tensors(model.params, lambda t: Tensor(t.data, requires_grad=True))
    clone = MatModel(model.config, params)
    loss = mse_loss(clone(xb, train=True, rng=train_rng), yb)
    scaled = ad.scale(loss, weight)
    ad.backward(scaled)
    return loss.item(), [p.grad for p in clone.parameters()]


def train_step(
    model: MatModel,
    xb: np.ndarray,
    yb: np.ndarray,
    opt: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    pool: ThreadPoolExecutor | None = None,
) -> float:
    """Forward, backward and one Adam update on a batch. Returns the batch loss."""
    named = model.named_parameters()
    params = [p for _, p in named]
    if pool is None or cfg.workers == 1 or len(xb) < 2:
        for p in params:
            p.grad = None
        loss = mse_loss(model(xb, train=True, rng=rng), yb)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss {value}")
        ad.backward(loss)
        grads = [p.grad for p in params]
    else:
        chunks = np.array_split(np.arange(len(xb)), min(cfg.workers, len(xb)))
        seeds = rng.integers(0, 2**63 - 1, size=len(chunks))
        futures = [
            pool.submit(
                _worker_grads, model, xb[c], yb[c], len(c) / len(xb), np.random.default_rng(s)
            )
            for c, s in zip(chunks, seeds)
        ]
        results = [f.result() for f in futures]
        value = sum(loss * len(c) / len(xb) for (loss, _), c in zip(results, chunks))
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss {value}")
        # index-ordered reduction keeps the sum deterministic
        grads = []
        for i in range(len(params)):
            acc = None
            for _, g in results:
                if g[i] is not None:
                    acc = g[i].copy() if acc is None else acc + g[i]
            grads.append(acc)
    if cfg.grad_clip is not None:
        grads = clip_global_norm(grads, cfg.grad_clip)
    adam_step(params, grads, opt, names=[n for n, _ in named])
    return value


class TrainingAborted(NumericError):
    """Numeric failure during training; ``last_good`` holds the previous weights."""

    def __init__(self, msg: str, last_good: dict[str, np.ndarray], epoch: int):
        super().__init__(msg)
        self.last_good = last_good
        self.epoch = epoch


def train(
    model: MatModel,
    data: PreparedData,
    cfg: TrainConfig,
    log=None,
) -> tuple[MatModel, MetricsReport]:
    """Fit ``model`` on ``data.train`` and report test metrics (val if no test split)."""
    cfg.validate()
    start = time.perf_counter()
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    opt = AdamState(lr=cfg.lr)
    train_curve: list[float] = []
    val_curve: list[float] = []
    best_val, best_state, stale = np.inf, None, 0
    last_good = model.state_dict()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    epochs_run = 0
    try:
        for epoch in range(cfg.epochs):
            opt.lr = cfg.lr * cfg.lr_decay**epoch
            total, count = 0.0, 0
            for batch in batches(data.train, cfg.batch_size, shuffle=True, seed=shuffle_rng):
                try:
                    loss = train_step(model, batch.x, batch.y, opt, cfg, dropout_rng, pool)
                except NumericError as exc:
                    raise TrainingAborted(str(exc), last_good, epoch) from None
                total += loss * len(batch)
                count += len(batch)
            epochs_run = epoch + 1
            last_good = model.state_dict()
            train_curve.append(total / count)
            if data.val is not None and len(data.val):
                val_mse = evaluate(model, data.val, dataclasses.replace(cfg, metrics_space="scaled"))["mse"]
                val_curve.append(val_mse)
                if cfg.patience is not None:
                    if val_mse < best_val:
                        best_val, best_state, stale = val_mse, model.state_dict(), 0
                    else:
                        stale += 1
                        if stale >= cfg.patience:
                            break
            if log is not None:
                log(epoch, train_curve[-1], val_curve[-1] if val_curve else None)
    finally:
        if pool is not None:
            pool.shutdown()
    if best_state is not None:
        model.load_state_dict(best_state)

    target = data.test if data.test is not None and len(data.test) else data.val
    if target is None:
        raise DataError("no test or validation windows to report on")
    metrics = evaluate(model, target, cfg, data.scaler)
    report = MetricsReport(
        dataset=data.name,
        lookback=model.config.L,
        horizon=model.config.T,
        mse=metrics["mse"],
        mae=metrics["mae"],
        metrics_space=cfg.metrics_space,
        baselines=baseline_scores(data, target, cfg),
        train_curve=train_curve,
        val_curve=val_curve,
        epochs_run=epochs_run,
        seed=cfg.seed,
        config={"model": model.config.to_dict(), "train": dataclasses.asdict(cfg)},
        wall_clock=time.perf_counter() - start,
    )
    return model, report
