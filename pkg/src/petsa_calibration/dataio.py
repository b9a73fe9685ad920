"""Benchmark CSV loading, chronological splits, normalization and windowing."""

import os
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view

from petsa_calibration.enums import Part
from petsa_calibration.exceptions import DataError

ETT_SPLIT_RATIOS = (0.6, 0.2, 0.2)
DEFAULT_SPLIT_RATIOS = (0.7, 0.1, 0.2)
MIN_STD = 1e-8


class DatasetError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    """A multivariate series, optionally split and standardized.

    ``values`` are raw until :func:`split_and_normalize` returns a copy whose
    values are standardized with the train-split ``mean`` and ``std``.
    """

    name: str
    values: np.ndarray
    columns: tuple[str, ...]
    timestamps: tuple[str, ...] | None = None
    train_end: int | None = None
    val_end: int | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    constant_columns: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def is_split(self) -> bool:
        return self.train_end is not None

    def part_bounds(self, part: Part) -> tuple[int, int]:
        """Row range ``[start, end)`` of a split part."""
        if not self.is_split:
            raise DatasetError(f"Dataset {self.name} has not been split yet")
        part = Part(part)
        if part == Part.TRAIN:
            return 0, self.train_end
        if part == Part.VAL:
            return self.train_end, self.val_end
        return self.val_end, self.n_rows

    def part_values(self, part: Part) -> np.ndarray:
        start, end = self.part_bounds(part)
        return self.values[start:end]

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        self._require_stats()
        return (np.asarray(raw, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        self._require_stats()
        return np.asarray(normalized, dtype=np.float64) * self.std + self.mean

    def _require_stats(self) -> None:
        if self.mean is None or self.std is None:
            raise DatasetError(f"Dataset {self.name} has no normalization statistics")


@dataclass(frozen=True)
class WindowPair:
    x: np.ndarray
    y: np.ndarray
    t_star: int


def load_csv(path: os.PathLike | str, name: str | None = None, min_rows: int = 2) -> Dataset:
    """Load a benchmark CSV: a header row, a timestamp column, then numeric variables.

    :param path: Path to the CSV file.
    :param name: Dataset name, defaults to the file stem.
    :param min_rows: Minimum number of data rows, typically ``L + H``.
    :raises DatasetError: On missing or non-numeric cells, or too few rows.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Dataset file {path} not found")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    if raw.shape[1] < 2:
        raise DatasetError(f"{path} needs a timestamp column and at least one variable")

    columns = tuple(raw.columns[1:])
    numeric = raw[list(columns)].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = (int(i) for i in np.argwhere(bad)[0])
        cell = raw.iloc[row, col + 1]
        kind = "missing value" if cell.strip() in ("", "NaN", "nan", "NA") else "non-numeric value"
        # row numbers are 1-based data rows, excluding the header
        raise DatasetError(f"{kind} {cell!r} in {path} at row {row + 1}, column {columns[col]!r}")

    values = numeric.to_numpy(dtype=np.float64)
    if values.shape[0] < min_rows:
        raise DatasetError(f"{path} has {values.shape[0]} rows, fewer than the {min_rows} required")
    logger.debug(f"Loaded {path} with {values.shape[0]} rows and {values.shape[1]} variables")
    return Dataset(
        name=name or path.stem,
        values=values,
        columns=columns,
        timestamps=tuple(raw.iloc[:, 0]),
    )


def default_split_ratios(name: str) -> tuple[float, float, float]:
    return ETT_SPLIT_RATIOS if name.upper().startswith("ETT") else DEFAULT_SPLIT_RATIOS


def split_and_normalize(
    ds: Dataset,
    ratios: Sequence[float] | None = None,
    borders: Sequence[int] | None = None,
) -> Dataset:
    """Split chronologically and standardize every variable with train-split statistics.

    Explicit ``borders`` ``(train_end, val_end)`` take precedence over ``ratios``.
    A third border ``test_end`` drops the rows after it, as the 12/4/4-month
    ETT split ``(8640, 11520, 14400)`` does.
    """
    if borders is not None:
        borders = [int(b) for b in borders]
        if len(borders) not in (2, 3):
            raise DatasetError(f"Split borders {borders} must be (train_end, val_end[, test_end])")
        if len(borders) == 3:
            if borders[2] > ds.n_rows:
                raise DatasetError(f"test_end {borders[2]} exceeds the {ds.n_rows} rows of {ds.name}")
            ds = replace(
                ds,
                values=ds.values[: borders[2]],
                timestamps=None if ds.timestamps is None else ds.timestamps[: borders[2]],
            )
        train_end, val_end = borders[:2]
    n_rows = ds.n_rows
    if borders is None:
        ratios = tuple(ratios) if ratios is not None else default_split_ratios(ds.name)
        if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
            raise DatasetError(f"Split ratios {ratios} must be three non-negative values summing to 1")
        train_end = int(n_rows * ratios[0])
        val_end = train_end + int(n_rows * ratios[1])
    if not 0 < train_end < val_end < n_rows:
        raise DatasetError(
            f"Split ({train_end}, {val_end}) of {n_rows} rows leaves a part of {ds.name} empty"
        )

    train = ds.values[:train_end]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    constant = std < MIN_STD
    constant_columns = tuple(c for c, flag in zip(ds.columns, constant, strict=True) if flag)
    if constant_columns:
        logger.warning(f"Constant columns in the train split of {ds.name}: {constant_columns}")
        std = np.where(constant, 1.0, std)

    return replace(
        ds,
        values=(ds.values - mean) / std,
        train_end=train_end,
        val_end=val_end,
        mean=mean,
        std=std,
        constant_columns=constant_columns,
    )


def _first_forecast_range(ds: Dataset, part: Part, lookback: int, horizon: int) -> range:
    start, end = ds.part_bounds(part)
    # train windows stay inside the train split; later parts may look back across the boundary
    first = start + lookback if Part(part) == Part.TRAIN else max(start, lookback)
    return range(first, end - horizon + 1)


def windows(
    ds: Dataset,
    part: Part,
    lookback: int,
    horizon: int,
    stride: int = 1,
) -> list[WindowPair]:
    """Sliding lookback/horizon pairs of a part, in chronological order."""
    if lookback < 1 or horizon < 1 or stride < 1:
        raise DatasetError(f"lookback, horizon and stride must be >= 1, got {lookback}, {horizon}, {stride}")
    start, end = ds.part_bounds(part)
    if end - start < lookback + horizon:
        logger.warning(
            f"{Part(part).value} part of {ds.name} has {end - start} rows, "
            f"fewer than lookback + horizon = {lookback + horizon}; no windows"
        )
        return []
    return [
        WindowPair(
            x=ds.values[t_star - lookback : t_star],
            y=ds.values[t_star : t_star + horizon],
            t_star=t_star,
        )
        for t_star in _first_forecast_range(ds, part, lookback, horizon)[::stride]
    ]


def stack_windows(
    ds: Dataset,
    part: Part,
    lookback: int,
    horizon: int,
    stride: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched form of :func:`windows`: ``x [B, L, V]``, ``y [B, H, V]`` and ``t_star [B]``."""
    pairs = windows(ds, part, lookback, horizon, stride)
    n_vars = ds.n_vars
    if not pairs:
        return (
            np.empty((0, lookback, n_vars)),
            np.empty((0, horizon, n_vars)),
            np.empty(0, dtype=np.int64),
        )
    t_star = np.array([p.t_star for p in pairs], dtype=np.int64)
    # [T - n + 1, V, n] views, moved to [*, n, V]
    x_view = np.moveaxis(sliding_window_view(ds.values, lookback, axis=0), -1, 1)
    y_view = np.moveaxis(sliding_window_view(ds.values, horizon, axis=0), -1, 1)
    return x_view[t_star - lookback].copy(), y_view[t_star].copy(), t_star
