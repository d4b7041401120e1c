"""CSV ingestion, chronological splits, global scaling and sliding windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .errors import ConfigError, DataError

JENA_TIME_FORMAT = "%d.%m.%Y %H:%M:%S"
_TIME_FORMATS = (JENA_TIME_FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d")
SCALER_EPS = 1e-8


@dataclass
class TimeSeriesDataset:
    values: np.ndarray  # (M, n)
    timestamps: list[str]
    channel_names: list[str]
    name: str = "dataset"

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.values.shape[1]

    def segment(self, start: int, stop: int, name: str) -> TimeSeriesDataset:
        return TimeSeriesDataset(
            self.values[:, start:stop], self.timestamps[start:stop], list(self.channel_names), name
        )


def _parse_time(text: str, fmt: str | None) -> datetime:
    if fmt is not None:
        return datetime.strptime(text, fmt)
    for candidate in _TIME_FORMATS:
        try:
            return datetime.strptime(text, candidate)
        except ValueError:
            continue
    raise ValueError(f"unrecognised timestamp {text!r}")


def _impute(values: np.ndarray, policy: str, path) -> np.ndarray:
    bad = ~np.isfinite(values)
    if not bad.any():
        return values
    if policy == "strict":
        m, t = np.argwhere(bad)[0]
        raise DataError(f"{path}: missing value in channel {m} at row {t} (strict imputation)")
    if policy != "ffill":
        raise ConfigError(f"unknown imputation policy {policy!r}")
    out = values.copy()
    for row in out:
        mask = ~np.isfinite(row)
        if mask.all():
            raise DataError(f"{path}: a channel has no finite values")
        idx = np.where(~mask, np.arange(len(row)), 0)
        np.maximum.accumulate(idx, out=idx)
        row[:] = row[idx]
        # leading gap: back-fill from the first finite value
        first = np.argmax(~mask)
        row[:first] = row[first]
    return out


def load_csv(
    path,
    time_column: str | None = None,
    time_format: str | None = None,
    impute: str = "ffill",
    name: str | None = None,
) -> TimeSeriesDataset:
    """Read a timestamped CSV (Jena layout: ``Date Time`` then numeric channels).

    The time column defaults to the first column. Timestamps must be strictly
    increasing. Non-finite cells are forward-filled (``impute="ffill"``, with a
    back-fill for a leading gap) or rejected (``impute="strict"``).
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if time_column and time_column not in header:
            raise DataError(f"{path}: no column named {time_column!r}")
        t_idx = header.index(time_column) if time_column else 0
        channels = [h for i, h in enumerate(header) if i != t_idx]
        if not channels:
            raise DataError(f"{path}: no data columns")
        stamps: list[str] = []
        rows: list[list[float]] = []
        prev: datetime | None = None
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                when = _parse_time(row[t_idx].strip(), time_format)
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from None
            if prev is not None and when <= prev:
                raise DataError(f"{path}:{line_no}: timestamp {row[t_idx]!r} is not increasing")
            prev = when
            try:
                rows.append([float(c) if c.strip() else math.nan for i, c in enumerate(row) if i != t_idx])
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from None
            stamps.append(when.isoformat())
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = _impute(np.array(rows, dtype=np.float64).T, impute, path)
    return TimeSeriesDataset(values, stamps, channels, name or path.stem)


def save_cache(ds: TimeSeriesDataset, stem) -> Path:
    return save_arrays(
        stem,
        {"values": ds.values},
        {"kind": "dataset", "name": ds.name, "channels": ds.channel_names, "timestamps": ds.timestamps},
    )


def load_cache(stem) -> TimeSeriesDataset:
    arrays, meta = load_arrays(stem)
    if meta.get("kind") != "dataset":
        raise DataError(f"{stem}: not a dataset cache")
    return TimeSeriesDataset(arrays["values"], meta["timestamps"], meta["channels"], meta["name"])


# -- splits -------------------------------------------------------------------------------------


def split_lengths(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) > 1 + 1e-9 or ratios[0] <= 0:
        raise ConfigError(f"split ratios must be three non-negative values summing to <= 1: {ratios}")
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    if abs(sum(ratios) - 1.0) < 1e-9:
        n_test = n - n_train - n_val
    else:
        n_test = int(math.floor(n * ratios[2] + 1e-9))
    return n_train, n_val, n_test


def chronological_split(
    ds: TimeSeriesDataset,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    min_length: int | None = None,
) -> tuple[TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset]:
    """Contiguous train/val/test segments in time order.

    With ``min_length`` (normally L + T) every non-empty segment is checked.
    """
    n_train, n_val, n_test = split_lengths(len(ds), ratios)
    parts = (
        ds.segment(0, n_train, "train"),
        ds.segment(n_train, n_train + n_val, "val"),
        ds.segment(n_train + n_val, n_train + n_val + n_test, "test"),
    )
    if min_length is not None:
        for part in parts:
            if 0 < len(part) < min_length:
                raise DataError(
                    f"{part.name} segment has {len(part)} steps, needs at least {min_length}"
                )
    return parts


# -- windows ------------------------------------------------------------------------------------------


@dataclass
class WindowSample:
    x: np.ndarray  # (M, L)
    y: np.ndarray  # (M, T)
    origin: int  # index of the first look-back step within its split


@dataclass
class WindowSet:
    """All windows of one split, stacked: x (n, M, L), y (n, M, T)."""

    x: np.ndarray
    y: np.ndarray
    origins: np.ndarray
    split: str = ""

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(self.x[i], self.y[i], int(self.origins[i]))

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> WindowSet:
        return WindowSet(self.x[idx], self.y[idx], self.origins[idx], self.split)


def count_windows(n: int, L: int, T: int) -> int:
    return max(n - L - T + 1, 0)


def windows(split: TimeSeriesDataset, L: int, T: int) -> WindowSet:
    """Every (look-back, target) pair inside ``split``: n - L - T + 1 of them."""
    n = len(split)
    if L < 1 or T < 1:
        raise ConfigError(f"L and T must be positive, got L={L}, T={T}")
    if n < L + T:
        raise DataError(f"{split.name or 'split'} has {n} steps, needs at least L+T={L + T}")
    view = np.lib.stride_tricks.sliding_window_view(split.values, L + T, axis=1)
    # view: (M, n_windows, L+T) -> (n_windows, M, L+T)
    stacked = np.moveaxis(view, 1, 0)  # strided view, batches copy on take()
    return WindowSet(stacked[..., :L], stacked[..., L:], np.arange(len(stacked)), split.name)


def batches(
    ws: WindowSet, batch_size: int, shuffle: bool = False, seed=None
) -> Iterator[WindowSet]:
    """Consecutive batches; the final partial batch is kept.

    ``seed`` may be an int or a numpy Generator; shuffling is a seeded permutation.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    order = np.arange(len(ws))
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(len(ws))
    for start in range(0, len(ws), batch_size):
        yield ws.take(order[start : start + batch_size])


# -- global scaling ----------------------------------------------------------------------------------


@dataclass
class Scaler:
    mean: np.ndarray  # (M,)
    std: np.ndarray  # (M,)

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Scale arrays whose channel axis is -2 (e.g. (M, n) or (B, M, T))."""
        return (values - self.mean[:, None]) / self.std[:, None]

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[:, None] + self.mean[:, None]


def fit_scaler(train: TimeSeriesDataset, eps: float = SCALER_EPS) -> Scaler:
    if len(train) == 0:
        raise DataError("cannot fit a scaler on an empty split")
    return Scaler(train.values.mean(axis=1), np.maximum(train.values.std(axis=1), eps))


def apply_scaler(ds: TimeSeriesDataset, scaler: Scaler) -> TimeSeriesDataset:
    return TimeSeriesDataset(scaler.transform(ds.values), ds.timestamps, ds.channel_names, ds.name)


def inverse_scaler(ds: TimeSeriesDataset, scaler: Scaler) -> TimeSeriesDataset:
    return TimeSeriesDataset(scaler.inverse(ds.values), ds.timestamps, ds.channel_names, ds.name)


@dataclass
class PreparedData:
    """Scaled windows for all three splits plus the scaler that produced them."""

    train: WindowSet
    val: WindowSet | None
    test: WindowSet | None
    scaler: Scaler
    channel_names: list[str] = field(default_factory=list)
    name: str = "dataset"


def prepare(
    ds: TimeSeriesDataset, L: int, T: int, ratios: Sequence[float] = (0.7, 0.1, 0.2)
) -> PreparedData:
    """Split, fit the scaler on train, and window every non-empty split."""
    train, val, test = chronological_split(ds, ratios, min_length=L + T)
    scaler = fit_scaler(train)

    def win(part):
        return windows(apply_scaler(part, scaler), L, T) if len(part) else None

    return PreparedData(win(train), win(val), win(test), scaler, list(ds.channel_names), ds.name)


# -- synthetic series ------------------------------------------------------------------------------------


def two_tone_series(
    n: int = 2000,
    M: int = 3,
    periods: tuple[float, float] = (24.0, 67.0),
    noise: float = 0.1,
    seed: int = 0,
) -> TimeSeriesDataset:
    """Per-channel mixture of two sinusoids with random phases/amplitudes plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    values = np.empty((M, n))
    for m in range(M):
        amp = rng.uniform(0.5, 1.5, 2)
        phase = rng.uniform(0, 2 * np.pi, 2)
        values[m] = (
            amp[0] * np.sin(2 * np.pi * t / periods[0] + phase[0])
            + amp[1] * np.sin(2 * np.pi * t / periods[1] + phase[1])
            + noise * rng.standard_normal(n)
        )
    return _synthetic(values, "two_tone")


def linear_series(n: int = 1000, M: int = 2, seed: int = 0) -> TimeSeriesDataset:
    """Noiseless per-channel straight lines a + b*t."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / n
    a = rng.uniform(-1, 1, M)
    b = rng.uniform(-2, 2, M)
    return _synthetic(a[:, None] + b[:, None] * t, "linear")


def _synthetic(values: np.ndarray, name: str) -> TimeSeriesDataset:
    base = np.datetime64("2020-01-01T00:00:00")
    stamps = [str(base + np.timedelta64(10 * i, "m")) for i in range(values.shape[1])]
    names = [f"ch{m}" for m in range(values.shape[0])]
    return TimeSeriesDataset(values, stamps, names, name)


def write_csv(ds: TimeSeriesDataset, path, time_format: str = JENA_TIME_FORMAT) -> None:
    """Write in the Jena layout (``Date Time`` first)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Date Time", *ds.channel_names])
        for i, stamp in enumerate(ds.timestamps):
            when = datetime.fromisoformat(stamp).strftime(time_format)
            w.writerow([when, *(repr(float(v)) for v in ds.values[:, i])])
