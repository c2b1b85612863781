"""Traffic dataset container, on-disk format, and window extraction.

A dataset directory holds ``meta.json`` (shape, sampling interval, start
timestamp, feature names, optional per-feature mean/std) next to
``data.bin``: row-major T x N x d little-endian float32 with no header or
padding. Calendar indices are synthesized from the start timestamp, so raw
exports only need the flow values themselves.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import (
    DataError,
    DegenerateFeatureError,
    InsufficientDataError,
)

MINUTES_PER_DAY = 24 * 60
# 1970-01-01 was a Thursday; day index 0 is Monday
_EPOCH_WEEKDAY = 3


def steps_per_day(interval_minutes: int) -> int:
    if interval_minutes <= 0 or MINUTES_PER_DAY % interval_minutes:
        raise DataError(f"interval_minutes must divide {MINUTES_PER_DAY}, got {interval_minutes}")
    return MINUTES_PER_DAY // interval_minutes


def calendar_indices(start_unix_seconds: int, n_steps: int,
                     interval_minutes: int) -> tuple[np.ndarray, np.ndarray]:
    """Day-of-week (Monday=0) and time-of-day slot for each timestep."""
    n_d = steps_per_day(interval_minutes)
    day0, sec = divmod(int(start_unix_seconds), 86400)
    slot0 = sec // (interval_minutes * 60)
    slots = slot0 + np.arange(n_steps, dtype=np.int64)
    tod = slots % n_d
    dow = ((day0 + _EPOCH_WEEKDAY) + slots // n_d) % 7
    return dow.astype(np.int64), tod.astype(np.int64)


@dataclass
class TrafficTensor:
    """Mode-3 traffic tensor (time x sensors x features) plus calendar indices."""

    values: np.ndarray            # (T, N, d) float32/float64
    day_of_week: np.ndarray       # (T,) int in [0, 6]
    time_of_day: np.ndarray       # (T,) int in [0, steps_per_day - 1]
    interval_minutes: int = 5
    start_unix_seconds: int = 0
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise DataError(f"values must be (T, N, d), got shape {self.values.shape}")
        t = self.values.shape[0]
        if len(self.day_of_week) != t or len(self.time_of_day) != t:
            raise DataError("calendar index length does not match T")
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.values.shape[2])]

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def slice_steps(self, start: int, stop: int) -> "TrafficTensor":
        return TrafficTensor(
            self.values[start:stop],
            self.day_of_week[start:stop],
            self.time_of_day[start:stop],
            self.interval_minutes,
            self.start_unix_seconds + start * self.interval_minutes * 60,
            list(self.feature_names),
        )


@dataclass
class WindowPair:
    """One history window and the target steps immediately after it."""

    history: np.ndarray       # (H, N, d)
    target: np.ndarray        # (Z, N, d)
    history_dow: np.ndarray   # (H,)
    history_tod: np.ndarray   # (H,)


@dataclass
class Standardizer:
    """Per-feature z-score transform fitted on the training split only."""

    mean: np.ndarray   # (d,)
    std: np.ndarray    # (d,)

    @classmethod
    def fit(cls, data: TrafficTensor) -> "Standardizer":
        mean = data.values.reshape(-1, data.n_features).mean(axis=0).astype(np.float64)
        std = data.values.reshape(-1, data.n_features).std(axis=0).astype(np.float64)
        bad = np.nonzero(std == 0)[0]
        if bad.size:
            raise DegenerateFeatureError(
                f"feature(s) {bad.tolist()} have zero variance and cannot be standardized")
        return cls(mean=mean, std=std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return ((values - self.mean) / self.std).astype(values.dtype)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return (values * self.std + self.mean).astype(values.dtype)


def standardize(data: TrafficTensor, stats: Standardizer) -> TrafficTensor:
    out = data.slice_steps(0, data.n_steps)
    out.values = stats.transform(data.values)
    return out


# ---------------------------------------------------------------------------
# disk format


def save_dataset(path, data: TrafficTensor) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "T": data.n_steps,
        "N": data.n_sensors,
        "d": data.n_features,
        "interval_minutes": data.interval_minutes,
        "start_unix_seconds": data.start_unix_seconds,
        "feature_names": list(data.feature_names),
    }
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    payload = np.ascontiguousarray(data.values, dtype="<f4")
    payload.tofile(path / "data.bin")


def load_dataset(path) -> TrafficTensor:
    path = Path(path)
    meta_path = path / "meta.json"
    bin_path = path / "data.bin"
    for p in (meta_path, bin_path):
        if not p.exists():
            raise DataError(f"missing dataset file: {p}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    try:
        t, n, d = int(meta["T"]), int(meta["N"]), int(meta["d"])
        interval = int(meta["interval_minutes"])
        start = int(meta["start_unix_seconds"])
    except KeyError as exc:
        raise DataError(f"{meta_path}: missing header key {exc}") from None
    expected = t * n * d * 4
    actual = bin_path.stat().st_size
    if actual != expected:
        raise DataError(
            f"{bin_path}: payload is {actual} bytes but header {t}x{n}x{d} requires {expected}")
    values = np.fromfile(bin_path, dtype="<f4").reshape(t, n, d)
    finite = np.isfinite(values)
    if not finite.all():
        offset = int(np.flatnonzero(~finite.ravel())[0])
        raise DataError(f"{bin_path}: non-finite value at scalar offset {offset}")
    dow, tod = calendar_indices(start, t, interval)
    return TrafficTensor(values, dow, tod, interval, start,
                         list(meta.get("feature_names", [])))


def convert_csv(csv_path, out_dir, n_sensors: int, n_features: int = 1,
                interval_minutes: int = 5, start_unix_seconds: int = 0) -> TrafficTensor:
    """Convert a CSV export (one row per timestep, N*d columns) to a dataset dir."""
    rows = []
    with open(csv_path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{csv_path}:{line_no}: {exc}") from None
    if not rows:
        raise DataError(f"{csv_path}: no data rows")
    width = n_sensors * n_features
    for line_no, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DataError(
                f"{csv_path}:{line_no}: expected {width} columns (N*d), got {len(row)}")
    values = np.asarray(rows, dtype=np.float32).reshape(len(rows), n_sensors, n_features)
    if not np.isfinite(values).all():
        raise DataError(f"{csv_path}: contains non-finite values")
    dow, tod = calendar_indices(start_unix_seconds, len(rows), interval_minutes)
    data = TrafficTensor(values, dow, tod, interval_minutes, start_unix_seconds)
    save_dataset(out_dir, data)
    return data


# ---------------------------------------------------------------------------
# splitting and windows


def split_dataset(data: TrafficTensor, ratios: tuple[float, float, float],
                  min_length: int = 0):
    """Chronological train/val/test split.

    Train and val get floor(ratio * T) steps; test takes the remainder.
    ``min_length`` (typically H+Z) rejects segments too short to window.
    """
    r_train, r_val, r_test = ratios
    if min(ratios) <= 0:
        raise ValueError(f"split ratios must be positive, got {ratios}")
    if abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    t = data.n_steps
    n_train = int(np.floor(r_train * t))
    n_val = int(np.floor(r_val * t))
    n_test = t - n_train - n_val
    for name, length in (("train", n_train), ("val", n_val), ("test", n_test)):
        if length < min_length:
            raise InsufficientDataError(
                f"{name} split has {length} steps, fewer than the required {min_length}")
    return (data.slice_steps(0, n_train),
            data.slice_steps(n_train, n_train + n_val),
            data.slice_steps(n_train + n_val, t))


def make_windows(segment: TrafficTensor, history: int, horizon: int) -> list[WindowPair]:
    """All sliding (history, target) pairs of a segment, in chronological order."""
    t = segment.n_steps
    if t < history + horizon:
        raise InsufficientDataError(
            f"segment has {t} steps, fewer than history+horizon = {history + horizon}")
    windows = []
    for start in range(t - history - horizon + 1):
        mid = start + history
        windows.append(WindowPair(
            history=segment.values[start:mid],
            target=segment.values[mid:mid + horizon],
            history_dow=segment.day_of_week[start:mid],
            history_tod=segment.time_of_day[start:mid],
        ))
    return windows


# ---------------------------------------------------------------------------
# synthetic generator


def synthesize_traffic(n_sensors: int, n_days: int, seed: int,
                       interval_minutes: int = 5, base: float = 200.0,
                       amplitude: float = 120.0, weekend_drop: float = 40.0,
                       noise: float = 4.0) -> TrafficTensor:
    """Deterministic synthetic flow: daily sinusoid + weekend dip + noise.

    Per sensor s, with n_d steps per day:
        x[t] = base_s + amp_s * sin(2 pi tod[t] / n_d + phase_s)
               - weekend_drop * [dow[t] in {5, 6}] + noise * eps[t]
    clipped at zero. base_s, amp_s, phase_s are drawn once per sensor, and
    all draws come from one Philox stream, so equal seeds give equal bytes.
    """
    if n_sensors < 1:
        raise ValueError(f"n_sensors must be >= 1, got {n_sensors}")
    if n_days < 2:
        raise ValueError(f"n_days must be >= 2, got {n_days}")
    n_d = steps_per_day(interval_minutes)
    t = n_days * n_d
    # 2024-01-01 00:00 UTC, a Monday, keeps the calendar aligned with day 0
    start = 1704067200
    dow, tod = calendar_indices(start, t, interval_minutes)
    gen = rng.stream(seed, "synthetic-traffic")
    base_s = base * (1.0 + 0.2 * gen.standard_normal(n_sensors))
    amp_s = amplitude * (1.0 + 0.1 * gen.standard_normal(n_sensors))
    phase_s = gen.uniform(0.0, 2.0 * np.pi, n_sensors)
    eps = gen.standard_normal((t, n_sensors))
    angle = 2.0 * np.pi * tod[:, None] / n_d + phase_s[None, :]
    weekend = (dow >= 5).astype(np.float64)[:, None]
    values = base_s[None, :] + amp_s[None, :] * np.sin(angle)
    values -= weekend_drop * weekend
    values += noise * eps
    values = np.maximum(values, 0.0).astype(np.float32)[:, :, None]
    return TrafficTensor(values, dow, tod, interval_minutes, start, ["flow"])
