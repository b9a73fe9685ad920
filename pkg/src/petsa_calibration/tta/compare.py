from collections.abc import Sequence
from dataclasses import replace

import pandas as pd
from loguru import logger
from pathos.multiprocessing import ProcessingPool as Pool

from petsa_calibration.calibration import dense_param_count, petsa_param_count
from petsa_calibration.dataio import Dataset
from petsa_calibration.enums import LossKind, Method, SweepAxis
from petsa_calibration.exceptions import UsageError
from petsa_calibration.forecasters import Forecaster
from petsa_calibration.tta.engine import AdaptationConfig, RunReport, run_tta

DEFAULT_METHODS = (Method.FROZEN, Method.DENSE_MSE, Method.PETSA)


def comparison_table(reports: Sequence[RunReport], rank: int) -> pd.DataFrame:
    """One row per run with error metrics, trainable parameters and the dense/petsa parameter ratio."""
    rows = []
    for report in reports:
        rows.append(
            {
                "dataset": report.dataset,
                "forecaster": report.forecaster,
                "horizon": report.horizon,
                "method": report.method.value,
                "mse": report.mse,
                "mae": report.mae,
                "n_params": report.n_params,
                "memory_mb": report.memory_mb,
                "param_ratio_dense_petsa": dense_param_count(report.horizon, report.n_vars)
                / petsa_param_count(report.lookback, report.horizon, report.n_vars, rank),
                "adapt_seconds": report.timings["adapt_seconds"],
            }
        )
    return pd.DataFrame(rows)


def compare_methods(
    ds: Dataset,
    f: Forecaster,
    cfg: AdaptationConfig,
    methods: Sequence[Method] = DEFAULT_METHODS,
    num_proc: int = 1,
) -> tuple[dict[Method, RunReport], pd.DataFrame]:
    """Run every method under the same seeds and label calendar.

    :param num_proc: Worker processes; runs are independent and share only
        the read-only dataset and forecaster.
    """
    methods = [Method(m) for m in methods]

    def run(method: Method) -> RunReport:
        return run_tta(ds, f, cfg, method)

    if num_proc > 1 and len(methods) > 1:
        logger.info(f"Running {len(methods)} methods on {min(num_proc, len(methods))} processes")
        with Pool(processes=min(num_proc, len(methods))) as pool:
            reports = pool.map(run, methods)
    else:
        reports = [run(method) for method in methods]
    return dict(zip(methods, reports, strict=True)), comparison_table(reports, cfg.rank)


def sweep_config(cfg: AdaptationConfig, axis: SweepAxis, value) -> AdaptationConfig:
    """Copy of ``cfg`` with one hyperparameter replaced."""
    axis = SweepAxis(axis)
    if axis == SweepAxis.BETA:
        return replace(cfg, loss=replace(cfg.loss, beta=float(value)))
    if axis == SweepAxis.LOSS:
        return replace(cfg, loss=replace(cfg.loss, kind=LossKind(value)))
    if axis == SweepAxis.RANK:
        return replace(cfg, rank=int(value))
    return replace(cfg, alpha0=float(value))


def run_sweep(
    ds: Dataset,
    f: Forecaster,
    cfg: AdaptationConfig,
    axis: SweepAxis,
    values: Sequence,
    num_proc: int = 1,
) -> list[RunReport]:
    """One petsa run per value of ``axis``, everything else fixed."""
    if not values:
        raise UsageError(f"sweep over {SweepAxis(axis).value} needs at least one value")
    configs = [sweep_config(cfg, axis, value) for value in values]

    def run(variant: AdaptationConfig) -> RunReport:
        return run_tta(ds, f, variant, Method.PETSA)

    if num_proc > 1 and len(configs) > 1:
        with Pool(processes=min(num_proc, len(configs))) as pool:
            return pool.map(run, configs)
    return [run(variant) for variant in configs]
