import numpy as np
from loguru import logger

from petsa_calibration.exceptions import DataError

MIN_PERIOD = 2


class PeriodEstimationError(DataError):
    pass


def variable_periods(series: np.ndarray) -> np.ndarray:
    """Dominant period of each column: ``round(T / k*)`` for the strongest nonzero bin ``k*``.

    Constant columns get period 0.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    n_steps = series.shape[0]
    if n_steps < 4:
        raise PeriodEstimationError(f"period estimation needs at least 4 steps, got {n_steps}")
    amplitude = np.abs(np.fft.rfft(series - series.mean(axis=0), axis=0))[1:]
    strongest = np.argmax(amplitude, axis=0) + 1
    periods = np.rint(n_steps / strongest).astype(np.int64)
    # a demeaned constant column leaves only rounding residue
    constant = amplitude.max(axis=0) <= 1e-12 * max(1.0, float(np.abs(series).max()))
    periods[constant] = 0
    return periods


def dominant_period(train_series: np.ndarray, cap: int = 720) -> int:
    """Majority vote of the per-variable periods, ties to the smaller period, clamped to ``[2, cap]``.

    :param train_series: Training values ``[T, V]``.
    :param cap: Upper clamp for the returned period.
    :raises PeriodEstimationError: When every variable is constant.
    """
    periods = variable_periods(train_series)
    periods = periods[periods > 0]
    if periods.size == 0:
        raise PeriodEstimationError(
            "every variable is constant; set adaptation.partial_threshold to a default period"
        )
    # np.unique sorts, so argmax picks the smallest period among the most frequent
    values, counts = np.unique(periods, return_counts=True)
    period = int(np.clip(values[np.argmax(counts)], MIN_PERIOD, max(MIN_PERIOD, cap)))
    logger.debug(f"Per-variable periods {periods.tolist()}, dominant period {period}")
    return period
