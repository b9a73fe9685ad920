"""Result files and the tables derived from them.

Every table is rebuilt from the per-run JSON files, using the stored
per-window error sums rather than any aggregate written alongside them.
"""

import io
import json
import os
from datetime import UTC, datetime
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from petsa_calibration.calibration import memory_mb, save_snapshot
from petsa_calibration.exceptions import DataError
from petsa_calibration.tta.engine import RunReport
from petsa_calibration.utils import atomic_write_bytes, atomic_write_text

RESULT_SCHEMA_VERSION = 1
RUNS_DIRNAME = "runs"
METHOD_ORDER = ["frozen", "dense_mse", "petsa"]


def run_stem(report: RunReport, tag: str | None = None) -> str:
    stem = f"{report.dataset}_{report.forecaster}_L{report.lookback}_H{report.horizon}_{report.method.value}"
    return f"{stem}_{tag}" if tag else stem


def write_run_result(
    report: RunReport,
    output_dir: os.PathLike,
    config: dict,
    save_predictions: bool = False,
    tag: str | None = None,
    extra: dict | None = None,
) -> Path:
    """Write one run as ``runs/<stem>.json``.

    Adapted runs also get ``runs/<stem>.snapshot`` with the final calibration
    modules; ``save_predictions`` adds ``runs/<stem>.npz``.
    """
    runs_dir = Path(output_dir) / RUNS_DIRNAME
    stem = run_stem(report, tag)
    result = {
        "schema_version": RESULT_SCHEMA_VERSION,
        "created_at": datetime.now(UTC).isoformat(),
        "tag": tag,
        "config": config,
        **(extra or {}),
        **report.as_dict(),
    }
    if save_predictions and report.predictions_after is not None:
        buffer = io.BytesIO()
        np.savez_compressed(
            buffer,
            t_star=report.t_star,
            before=report.predictions_before,
            after=report.predictions_after,
        )
        atomic_write_bytes(runs_dir / f"{stem}.npz", buffer.getvalue())
        result["predictions_file"] = f"{stem}.npz"
    if report.modules:
        header_keys = ("method", "dataset", "forecaster", "lookback", "horizon", "n_vars")
        snapshot_header = {key: result[key] for key in header_keys}
        save_snapshot(report.modules, runs_dir / f"{stem}.snapshot", snapshot_header)
        result["snapshot_file"] = f"{stem}.snapshot"
    path = runs_dir / f"{stem}.json"
    atomic_write_text(path, json.dumps(result, indent=2, default=str))
    logger.info(f"Wrote {path}")
    return path


def load_run_results(output_dir: os.PathLike) -> list[dict]:
    runs_dir = Path(output_dir) / RUNS_DIRNAME
    results = []
    for path in sorted(runs_dir.glob("*.json")):
        with open(path, encoding="utf-8") as f:
            result = json.load(f)
        if result.get("schema_version") != RESULT_SCHEMA_VERSION:
            raise DataError(
                f"{path} has schema version {result.get('schema_version')}, expected {RESULT_SCHEMA_VERSION}"
            )
        results.append(result)
    if not results:
        raise DataError(f"No run results found in {runs_dir}")
    return results


def results_frame(results: list[dict]) -> pd.DataFrame:
    """One row per run with MSE and MAE recomputed from the per-window error sums."""
    rows = []
    for r in results:
        n_values = len(r["per_window_sse"]) * r["horizon"] * r["n_vars"]
        rows.append(
            {
                "dataset": r["dataset"],
                "forecaster": r["forecaster"],
                "horizon": r["horizon"],
                "method": r["method"],
                "tag": r.get("tag"),
                "mse": float(np.sum(r["per_window_sse"])) / n_values,
                "mae": float(np.sum(r["per_window_sae"])) / n_values,
                "n_params": r["n_params"],
                "memory_mb": memory_mb(r["n_params"]),
            }
        )
    return pd.DataFrame(rows)


def _ordered_methods(methods) -> list[str]:
    known = [m for m in METHOD_ORDER if m in set(methods)]
    return known + sorted(set(methods) - set(known))


def summary_table(frame: pd.DataFrame) -> pd.DataFrame:
    """MSE with rows ``(dataset, forecaster, horizon)`` and one column per method."""
    table = frame.pivot_table(
        index=["dataset", "forecaster", "horizon"], columns="method", values="mse", aggfunc="first"
    )
    return table[_ordered_methods(table.columns)]


def parameters_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Trainable parameters and their float64 footprint per horizon and method."""
    table = frame[["dataset", "forecaster", "horizon", "method", "n_params", "memory_mb"]].copy()
    petsa = table[table["method"] == "petsa"].set_index(["dataset", "forecaster", "horizon"])["n_params"]
    keys = pd.MultiIndex.from_frame(table[["dataset", "forecaster", "horizon"]])
    table["ratio_to_petsa"] = table["n_params"].to_numpy() / petsa.reindex(keys).to_numpy()
    return table.sort_values(["dataset", "forecaster", "horizon", "method"]).reset_index(drop=True)


def win_counts(frame: pd.DataFrame) -> pd.DataFrame:
    """Best-MSE counters per ``(forecaster, method)``.

    ``cw`` counts ``(dataset, horizon)`` rows where the method is best among the
    methods run on the same forecaster; ``rw`` counts rows where it is best
    across every forecaster and method. Ties credit every tied entry.
    """
    counts = {
        key: {"cw": 0, "rw": 0}
        for key in frame[["forecaster", "method"]].drop_duplicates().itertuples(index=False, name=None)
    }
    for _, group in frame.groupby(["dataset", "horizon", "forecaster"]):
        best = group["mse"].min()
        for key in group.loc[group["mse"] == best, ["forecaster", "method"]].itertuples(index=False, name=None):
            counts[key]["cw"] += 1
    for _, group in frame.groupby(["dataset", "horizon"]):
        best = group["mse"].min()
        for key in group.loc[group["mse"] == best, ["forecaster", "method"]].itertuples(index=False, name=None):
            counts[key]["rw"] += 1
    rows = [{"forecaster": f, "method": m, **c} for (f, m), c in counts.items()]
    return pd.DataFrame(rows).sort_values(["forecaster", "method"]).reset_index(drop=True)


def write_table(table: pd.DataFrame, path: os.PathLike, index: bool = False) -> Path:
    path = Path(path)
    atomic_write_text(path, table.to_csv(index=index, float_format="%.10g"))
    logger.info(f"Wrote {path}")
    return path


def sweep_frame(results: list[dict], axis: str) -> pd.DataFrame:
    """Long-format sweep data: one row per (axis value, horizon) with MSE."""
    rows = []
    for r in results:
        if r.get("sweep_axis") != axis:
            continue
        n_values = len(r["per_window_sse"]) * r["horizon"] * r["n_vars"]
        rows.append(
            {
                "axis": axis,
                "value": r["sweep_value"],
                "dataset": r["dataset"],
                "forecaster": r["forecaster"],
                "horizon": r["horizon"],
                "mse": float(np.sum(r["per_window_sse"])) / n_values,
                "n_params": r["n_params"],
            }
        )
    return pd.DataFrame(rows)
