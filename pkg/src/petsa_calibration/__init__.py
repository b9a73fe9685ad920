import json
import sys
from dataclasses import replace
from importlib.metadata import version
from pathlib import Path
from typing import Annotated

from cyclopts import App, CycloptsError, Parameter
from loguru import logger

from petsa_calibration.enums import Part, SweepAxis
from petsa_calibration.exceptions import PetsaError, UsageError

app = App(
    version=version("petsa-calibration"),
    version_flags=["--version", "-V"],
    help="Test-time calibration of frozen time-series forecasters with gated low-rank modules",
)


def set_log_level(verbose: int = 0) -> None:
    logger.remove()
    if verbose > 2:
        logger.add(sys.stderr, level="TRACE")
    elif verbose == 2:
        logger.add(sys.stderr, level="DEBUG")
    elif verbose == 1:
        logger.add(sys.stderr, level="INFO")
    else:
        logger.add(sys.stderr, level="WARNING")


def _prepare(config_filepath, overrides, dataset_path, output_dir=None, num_proc=None):
    """Load the merged config, its typed view and the split, normalized dataset."""
    from petsa_calibration.dataio import load_csv, split_and_normalize
    from petsa_calibration.experiment import ExperimentConfig
    from petsa_calibration.utils import _load_config

    config = _load_config(config_filepath, overrides or ())
    if dataset_path is not None:
        config["dataset"]["path"] = dataset_path
    exp = ExperimentConfig.from_config(config, output_dir=output_dir, num_proc=num_proc)
    if not exp.dataset_path.exists():
        raise UsageError(f"Dataset file {exp.dataset_path} not found")
    ds = load_csv(exp.dataset_path, exp.dataset_name, min_rows=exp.lookback + max(exp.horizons))
    ds = split_and_normalize(ds, exp.split_ratios, exp.borders)
    config["dataset"]["name"] = ds.name
    return config, exp, ds


@app.command
def train(
    config_filepath: str | None = None,
    dataset_path: str | None = None,
    set_overrides: Annotated[list[str] | None, Parameter(name="--set")] = None,
    force: bool = False,
    verbose: Annotated[list[bool], Parameter(alias="-v")] = (),
) -> None:
    """Fit the configured backbone for every horizon and write frozen checkpoints

    Parameters
    ----------
    config_filepath: str
        Optional path to a YAML config merged over the packaged defaults
    dataset_path: str
        Optional dataset CSV, overrides dataset.path
    set_overrides: list[str]
        Config overrides of the form section.key=value. Repeat for several.
    force: flag
        Overwrite existing checkpoints.
    verbose: flag
        Enable verbose logging. Repeat flag for more verbosity.
    """
    set_log_level(sum(verbose))
    from petsa_calibration.checkpoint import save_checkpoint
    from petsa_calibration.dataio import stack_windows
    from petsa_calibration.forecasters import evaluate_mse, fit_forecaster
    from petsa_calibration.utils import calculate_sha256

    config, exp, ds = _prepare(config_filepath, set_overrides, dataset_path)
    for horizon in exp.horizons:
        ckpt = exp.checkpoint(ds.name, horizon)
        if ckpt.exists() and not force:
            raise UsageError(f"Checkpoint {ckpt} already exists; pass --force to overwrite it")

    provenance = {
        "dataset": ds.name,
        "dataset_sha256": calculate_sha256(exp.dataset_path),
        "train_end": ds.train_end,
        "val_end": ds.val_end,
        "mean": ds.mean.tolist(),
        "std": ds.std.tolist(),
    }
    for horizon in exp.horizons:
        x, y, _ = stack_windows(ds, Part.TRAIN, exp.lookback, horizon)
        f = fit_forecaster(exp.kind, x, y, config["forecaster"], seed=exp.seed, provenance=provenance)
        ckpt = exp.checkpoint(ds.name, horizon)
        save_checkpoint(f, ckpt)
        x_val, y_val, _ = stack_windows(ds, Part.VAL, exp.lookback, horizon)
        print(f"{ds.name} {f.KIND.value} H={horizon}: validation MSE {evaluate_mse(f, x_val, y_val):.6f} ({ckpt})")


@app.command
def adapt(
    config_filepath: str | None = None,
    dataset_path: str | None = None,
    set_overrides: Annotated[list[str] | None, Parameter(name="--set")] = None,
    output_dir: str | None = None,
    num_proc: int | None = None,
    verbose: Annotated[list[bool], Parameter(alias="-v")] = (),
) -> None:
    """
    Stream the test split through each checkpoint with every configured method.

    Writes one JSON result per run plus a snapshot of the adapted modules,
    summary_mse.csv (horizons by methods), parameters.csv (trainable parameters
    and their size in MB) and comparison.csv (adaptation time and the
    dense/petsa parameter ratio per run).

    Parameters
    ----------
    config_filepath: str
        Optional path to a YAML config merged over the packaged defaults
    dataset_path: str
        Optional dataset CSV, overrides dataset.path
    set_overrides: list[str]
        Config overrides of the form section.key=value. Repeat for several.
    output_dir: str
        Optional output directory, overrides output.directory
    num_proc: int
        Optional number of processes for independent runs, overrides output.num_proc
    verbose: flag
        Enable verbose logging. Repeat flag for more verbosity.
    """
    set_log_level(sum(verbose))
    import pandas as pd

    from petsa_calibration.checkpoint import load_checkpoint
    from petsa_calibration.report import (
        parameters_table,
        results_frame,
        summary_table,
        write_run_result,
        write_table,
    )
    from petsa_calibration.tta.compare import compare_methods

    config, exp, ds = _prepare(config_filepath, set_overrides, dataset_path, output_dir, num_proc)

    written = []
    comparisons = []
    for horizon in exp.horizons:
        f = load_checkpoint(exp.checkpoint(ds.name, horizon), exp.lookback, horizon, ds.n_vars)
        reports, comparison = compare_methods(ds, f, exp.adaptation, exp.methods, exp.num_proc)
        comparisons.append(comparison)
        for report in reports.values():
            written.append(write_run_result(report, exp.output_dir, config, exp.save_predictions))

    frame = results_frame([_read_json(p) for p in written])
    summary = summary_table(frame)
    write_table(summary, exp.output_dir / "summary_mse.csv", index=True)
    write_table(parameters_table(frame), exp.output_dir / "parameters.csv")
    write_table(pd.concat(comparisons, ignore_index=True), exp.output_dir / "comparison.csv")
    print(summary.to_string(float_format=lambda v: f"{v:.4f}"))


@app.command
def sweep(
    axis: SweepAxis,
    config_filepath: str | None = None,
    dataset_path: str | None = None,
    set_overrides: Annotated[list[str] | None, Parameter(name="--set")] = None,
    output_dir: str | None = None,
    num_proc: int | None = None,
    verbose: Annotated[list[bool], Parameter(alias="-v")] = (),
) -> None:
    """Run petsa once per value of one hyperparameter and write long-format plot data

    Parameters
    ----------
    axis: SweepAxis
        Hyperparameter to sweep: beta, rank, alpha0 or loss. Values come from the sweep config section.
    config_filepath: str
        Optional path to a YAML config merged over the packaged defaults
    dataset_path: str
        Optional dataset CSV, overrides dataset.path
    set_overrides: list[str]
        Config overrides of the form section.key=value. Repeat for several.
    output_dir: str
        Optional output directory, overrides output.directory
    num_proc: int
        Optional number of processes for independent runs, overrides output.num_proc
    verbose: flag
        Enable verbose logging. Repeat flag for more verbosity.
    """
    set_log_level(sum(verbose))
    from petsa_calibration.checkpoint import load_checkpoint
    from petsa_calibration.report import sweep_frame, write_run_result, write_table
    from petsa_calibration.tta.compare import run_sweep

    config, exp, ds = _prepare(config_filepath, set_overrides, dataset_path, output_dir, num_proc)
    values = exp.sweep_values(axis)
    cfg = replace(exp.adaptation, store_predictions=False)

    written = []
    for horizon in exp.horizons:
        f = load_checkpoint(exp.checkpoint(ds.name, horizon), exp.lookback, horizon, ds.n_vars)
        for value, report in zip(values, run_sweep(ds, f, cfg, axis, values, exp.num_proc), strict=True):
            written.append(
                write_run_result(
                    report,
                    exp.output_dir,
                    config,
                    tag=f"sweep-{axis.value}-{value}",
                    extra={"sweep_axis": axis.value, "sweep_value": value},
                )
            )

    table = sweep_frame([_read_json(p) for p in written], axis.value)
    write_table(table, exp.output_dir / f"sweep_{axis.value}.csv")
    print(table.to_string(index=False))


@app.command(name="report")
def report_results(
    output_dir: str = "results",
    verbose: Annotated[list[bool], Parameter(alias="-v")] = (),
) -> None:
    """Rebuild the summary, parameter, win-count and sweep tables from stored run results

    Parameters
    ----------
    output_dir: str
        Directory holding the runs/ folder written by adapt and sweep
    verbose: flag
        Enable verbose logging. Repeat flag for more verbosity.
    """
    set_log_level(sum(verbose))
    from petsa_calibration.report import (
        load_run_results,
        parameters_table,
        results_frame,
        summary_table,
        sweep_frame,
        win_counts,
        write_table,
    )

    output = Path(output_dir)
    results = load_run_results(output)
    adapt_results = [r for r in results if r.get("tag") is None]
    if adapt_results:
        frame = results_frame(adapt_results)
        summary = summary_table(frame)
        write_table(summary, output / "summary_mse.csv", index=True)
        write_table(parameters_table(frame), output / "parameters.csv")
        wins = win_counts(frame)
        write_table(wins, output / "win_counts.csv")
        print(summary.to_string(float_format=lambda v: f"{v:.4f}"))
        print(wins.to_string(index=False))
    for axis in SweepAxis:
        table = sweep_frame(results, axis.value)
        if not table.empty:
            write_table(table, output / f"sweep_{axis.value}.csv")


def _read_json(path: Path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def main() -> None:
    try:
        app(exit_on_error=False)
    except CycloptsError as ex:
        print(ex, file=sys.stderr)
        raise SystemExit(UsageError.exit_code) from ex
    except PetsaError as ex:
        logger.error(f"{type(ex).__name__}: {ex}")
        raise SystemExit(ex.exit_code) from ex


if __name__ == "__main__":
    main()
