import os
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from petsa_calibration.dataio import Dataset, load_csv, split_and_normalize
from petsa_calibration.tensorgrad import Tensor, backward

DATA_DIR = Path(os.environ.get("PETSA_DATA_DIR", "/nonexistent"))
ETTH1_PATH = DATA_DIR / "ETTh1.csv"
ETTH2_PATH = DATA_DIR / "ETTh2.csv"
# 12/4/4 months of hourly rows
ETT_HOURLY_BORDERS = (8640, 11520, 14400)

requires_etth1 = pytest.mark.skipif(
    not ETTH1_PATH.exists(), reason="ETTh1.csv not found under $PETSA_DATA_DIR"
)
requires_ett_hourly = pytest.mark.skipif(
    not (ETTH1_PATH.exists() and ETTH2_PATH.exists()),
    reason="ETTh1.csv and ETTh2.csv not found under $PETSA_DATA_DIR",
)


def write_csv(path: Path, values: np.ndarray, columns: list[str] | None = None) -> Path:
    """Write ``values`` in the benchmark layout: a ``date`` column then one column per variable."""
    values = np.asarray(values)
    columns = columns or [f"var{i}" for i in range(values.shape[1])]
    frame = pd.DataFrame(values, columns=columns)
    dates = pd.date_range("2016-07-01", periods=len(values), freq="h")
    frame.insert(0, "date", dates.strftime("%Y-%m-%d %H:%M:%S"))
    frame.to_csv(path, index=False)
    return path


def synthetic_series(
    n_rows: int = 600,
    n_vars: int = 3,
    period: int = 24,
    seed: int = 0,
    shift: float = 0.0,
    shift_start: float = 0.8,
) -> np.ndarray:
    """Noisy per-variable sinusoids sharing one period, with an optional late level and amplitude shift."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_rows)[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=n_vars)
    amplitude = rng.uniform(1.0, 2.0, size=n_vars)
    values = amplitude * np.sin(2 * np.pi * t / period + phase) + 0.1 * rng.standard_normal((n_rows, n_vars))
    values += 0.05 * t / period
    late = t[:, 0] >= int(shift_start * n_rows)
    values[late] = values[late] * (1.0 + 0.5 * shift) + shift
    return values


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy_csv(tmp_path) -> Path:
    return write_csv(tmp_path / "toy.csv", synthetic_series(n_rows=600, n_vars=3, shift=0.8))


@pytest.fixture
def toy_dataset(toy_csv) -> Dataset:
    return split_and_normalize(load_csv(toy_csv))


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. every entry of ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + eps
        upper = fn()
        array[idx] = original - eps
        lower = fn()
        array[idx] = original
        grad[idx] = (upper - lower) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def assert_gradients_match(loss_fn: Callable[[], Tensor], params: list[Tensor], tol: float = 1e-4):
    """Compare tape gradients of ``loss_fn()`` with central differences for every tensor in ``params``."""
    backward(loss_fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, grad in zip(params, analytic, strict=True):
        numeric = numerical_gradient(lambda: loss_fn().item(), p.data)
        assert relative_error(grad, numeric) < tol
