"""Dataset ingestion, chronological splitting, windowing, and synthetic generators.

CSV files follow the ETT conventions: a required header row, an optional
leading date column (auto-detected), numeric cells everywhere else. Rows are
never shuffled; the dataset-level scaler is fit on training rows only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from datetime import datetime
from typing import Iterator, Literal

import numpy as np

from .errors import DataError
from .neural import seeded_rng

Split = Literal["train", "val", "test"]

#: Fixed hourly-ETT bounds: 12 months train, 4 val, 4 test at 30-day months.
ETT_HOURLY_BOUNDS = (12 * 30 * 24, 16 * 30 * 24, 20 * 30 * 24)

SCALER_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Dataset:
    """An ordered multivariate series with optional split bounds and scaler."""

    name: str
    values: np.ndarray
    timestamps: list | None = None
    split_bounds: tuple[int, int] | None = None
    scaler: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_variates(self) -> int:
        return self.values.shape[1]

    def split_range(self, split: Split) -> tuple[int, int]:
        if self.split_bounds is None:
            raise DataError(f"dataset {self.name!r} has no split bounds; call chronological_split")
        train_end, val_end = self.split_bounds
        return {"train": (0, train_end), "val": (train_end, val_end), "test": (val_end, self.n_rows)}[split]

    def split_values(self, split: Split, scaled: bool = True) -> np.ndarray:
        lo, hi = self.split_range(split)
        vals = self.scaled_values if scaled else self.values
        return vals[lo:hi]

    @property
    def scaled_values(self) -> np.ndarray:
        if self.scaler is None:
            return self.values
        mean, std = self.scaler
        return (self.values - mean) / std


@dataclass(frozen=True)
class WindowPair:
    """A contiguous lookback window and the target rows that follow it."""

    lookback: np.ndarray
    target: np.ndarray
    origin_index: int


def load_csv(path: str, name: str | None = None) -> Dataset:
    """Read an ETT-style CSV into time order; rejects ragged or non-numeric rows."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: header only, no data rows")

    def parse_float(cell: str) -> float:
        return float(cell)

    has_date = False
    try:
        parse_float(rows[0][0])
    except (ValueError, IndexError):
        has_date = True
    first_value_col = 1 if has_date else 0
    n_cols = len(header)
    values = np.empty((len(rows), n_cols - first_value_col), dtype=np.float64)
    timestamps: list | None = [] if has_date else None
    for i, row in enumerate(rows):
        line_no = i + 2  # 1-based, header is line 1
        if len(row) != n_cols:
            raise DataError(f"{path}: line {line_no} has {len(row)} cells, expected {n_cols}")
        if has_date:
            raw = row[0]
            try:
                timestamps.append(datetime.fromisoformat(raw))
            except ValueError:
                timestamps.append(raw)
        for j, cell in enumerate(row[first_value_col:]):
            try:
                v = parse_float(cell)
            except ValueError:
                raise DataError(f"{path}: line {line_no}, column {j + first_value_col + 1}: "
                                f"cannot parse {cell!r} as a number") from None
            if not np.isfinite(v):
                raise DataError(f"{path}: line {line_no}, column {j + first_value_col + 1}: "
                                f"non-finite value {cell!r}")
            values[i, j] = v
    return Dataset(name=name or path, values=values, timestamps=timestamps)


def save_csv(dataset: Dataset, path: str) -> None:
    """Write back in the same schema (date column included when present)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = [f"v{j}" for j in range(dataset.n_variates)]
        if dataset.timestamps is not None:
            writer.writerow(["date"] + cols)
            for ts, row in zip(dataset.timestamps, dataset.values):
                writer.writerow([ts] + [repr(float(x)) for x in row])
        else:
            writer.writerow(cols)
            for row in dataset.values:
                writer.writerow([repr(float(x)) for x in row])


def _fit_scaler(values: np.ndarray, train_end: int) -> tuple[np.ndarray, np.ndarray]:
    train = values[:train_end]
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), SCALER_STD_FLOOR)
    return mean, std


def chronological_split(
    dataset: Dataset,
    ratios: tuple[float, float] = (0.7, 0.1),
    preset: str | None = None,
    min_rows: int | None = None,
) -> Dataset:
    """Assign contiguous train/val/test bounds and fit the train-only scaler.

    ``preset='ett'`` applies the fixed hourly 12/4/4-month bounds (truncating
    the series to 20 months) when the file is long enough, falling back to
    60/20/20 ratios otherwise. ``min_rows`` (typically T+H) validates that
    every split can hold at least one window pair.
    """
    values = dataset.values
    timestamps = dataset.timestamps
    if preset == "ett":
        if dataset.n_rows >= ETT_HOURLY_BOUNDS[2]:
            train_end, val_end, total = ETT_HOURLY_BOUNDS
            values = values[:total]
            timestamps = timestamps[:total] if timestamps is not None else None
        else:
            train_end = int(dataset.n_rows * 0.6)
            val_end = int(dataset.n_rows * 0.8)
    elif preset is None:
        if not (0 < ratios[0] and 0 < ratios[1] and ratios[0] + ratios[1] <= 1):
            raise DataError(f"split ratios must be positive and sum to <= 1, got {ratios}")
        train_end = int(dataset.n_rows * ratios[0])
        val_end = train_end + int(dataset.n_rows * ratios[1])
    else:
        raise DataError(f"unknown split preset {preset!r}")
    n = values.shape[0]
    sizes = {"train": train_end, "val": val_end - train_end, "test": n - val_end}
    if min(sizes.values()) <= 0:
        raise DataError(f"degenerate split sizes {sizes} for {n} rows")
    if min_rows is not None:
        for split, size in sizes.items():
            if size < min_rows:
                raise DataError(
                    f"{split} split has {size} rows but at least {min_rows} are needed "
                    f"for one lookback+forecast window"
                )
    return replace(
        dataset,
        values=values,
        timestamps=timestamps,
        split_bounds=(train_end, val_end),
        scaler=_fit_scaler(values, train_end),
    )


def windows(
    dataset: Dataset,
    split: Split,
    lookback: int,
    horizon: int,
    stride: int = 1,
    scaled: bool = True,
) -> Iterator[WindowPair]:
    """All window pairs fully contained in the split, in time order."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    lo, hi = dataset.split_range(split)
    rows = hi - lo
    need = lookback + horizon
    if rows < need:
        raise DataError(f"{split} split has {rows} rows, needs at least {need}")
    vals = dataset.scaled_values if scaled else dataset.values
    for origin in range(lo, hi - need + 1, stride):
        yield WindowPair(
            lookback=vals[origin : origin + lookback],
            target=vals[origin + lookback : origin + need],
            origin_index=origin,
        )


def window_count(dataset: Dataset, split: Split, lookback: int, horizon: int, stride: int = 1) -> int:
    lo, hi = dataset.split_range(split)
    usable = (hi - lo) - lookback - horizon + 1
    return 0 if usable <= 0 else (usable + stride - 1) // stride


# ---------------------------------------------------------------------------
# synthetic generators (deterministic given seed)
# ---------------------------------------------------------------------------


def _rotation_block_diag(angles: np.ndarray, dim: int) -> np.ndarray:
    a = np.eye(dim)
    for j, theta in enumerate(angles):
        c, s = np.cos(theta), np.sin(theta)
        a[2 * j : 2 * j + 2, 2 * j : 2 * j + 2] = [[c, -s], [s, c]]
    return a


def synth_generate(kind: str, params: dict | None = None, seed: int = 0) -> Dataset:
    """Deterministic synthetic datasets used as test oracles.

    Kinds: ``sinusoid_mix`` (sum of fixed tones), ``trend_plus_season``,
    ``regime_switch_linear`` (piecewise-constant rotational latent dynamics on
    top of a shared tone), and ``var_process`` (observable VAR(1)).
    """
    p = dict(params or {})
    rng = seeded_rng(seed, stream=900)
    length = int(p.pop("length", 1024))
    variates = int(p.pop("variates", 2))
    if length < 8 or variates < 1:
        raise ValueError(f"invalid synthetic size: length={length}, variates={variates}")
    t = np.arange(length)[:, None]

    if kind == "sinusoid_mix":
        periods = list(p.pop("periods", [24.0, 57.0]))
        amps = list(p.pop("amps", [1.0] * len(periods)))
        noise = float(p.pop("noise", 0.0))
        if len(amps) != len(periods) or any(q <= 1 for q in periods):
            raise ValueError(f"bad sinusoid params: periods={periods}, amps={amps}")
        phases = rng.uniform(0, 2 * np.pi, size=(len(periods), variates))
        values = np.zeros((length, variates))
        for period, amp, phase in zip(periods, amps, phases):
            values += amp * np.sin(2 * np.pi * t / period + phase)
        values += noise * rng.standard_normal(values.shape)
    elif kind == "trend_plus_season":
        slope = float(p.pop("slope", 0.01))
        period = float(p.pop("period", 48.0))
        amp = float(p.pop("amp", 1.0))
        noise = float(p.pop("noise", 0.0))
        phases = rng.uniform(0, 2 * np.pi, size=variates)
        values = slope * t + amp * np.sin(2 * np.pi * t / period + phases)
        values += noise * rng.standard_normal(values.shape)
    elif kind == "regime_switch_linear":
        latent_dim = int(p.pop("latent_dim", 4))
        regime_len = int(p.pop("regime_len", max(64, length // 8)))
        n_regimes = int(p.pop("regimes", 2))
        base_period = float(p.pop("base_period", 24.0))
        base_amp = float(p.pop("base_amp", 3.0))
        var_amp = float(p.pop("var_amp", 1.0))
        noise = float(p.pop("noise", 0.02))
        if latent_dim % 2 or latent_dim < 2 or n_regimes < 1 or regime_len < 2:
            raise ValueError(
                f"bad regime params: latent_dim={latent_dim} (must be even), "
                f"regimes={n_regimes}, regime_len={regime_len}"
            )
        angles = rng.uniform(0.15, 1.1, size=(n_regimes, latent_dim // 2))
        ops = [_rotation_block_diag(angles[i], latent_dim) for i in range(n_regimes)]
        readout = rng.standard_normal((variates, latent_dim)) / np.sqrt(latent_dim)
        h = rng.standard_normal(latent_dim)
        h /= np.linalg.norm(h)
        latents = np.empty((length, latent_dim))
        for i in range(length):
            latents[i] = h
            h = ops[(i // regime_len) % n_regimes] @ h
        phases = rng.uniform(0, 2 * np.pi, size=variates)
        values = base_amp * np.sin(2 * np.pi * t / base_period + phases)
        values += var_amp * latents @ readout.T
        values += noise * rng.standard_normal(values.shape)
    elif kind == "var_process":
        transition = p.pop("transition", None)
        noise = float(p.pop("noise", 0.0))
        if transition is None:
            radius = float(p.pop("spectral_radius", 0.9))
            g = rng.standard_normal((variates, variates))
            g *= radius / max(np.abs(np.linalg.eigvals(g)))
            transition = g
        else:
            transition = np.asarray(transition, dtype=np.float64)
            if transition.shape != (variates, variates):
                raise ValueError(f"transition shape {transition.shape} != ({variates}, {variates})")
        x = rng.standard_normal(variates)
        values = np.empty((length, variates))
        for i in range(length):
            values[i] = x
            x = transition @ x + noise * rng.standard_normal(variates)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if p:
        raise ValueError(f"unused synthetic params for {kind!r}: {sorted(p)}")
    ds = Dataset(name=f"synth:{kind}:{seed}", values=values)
    return chronological_split(ds)
