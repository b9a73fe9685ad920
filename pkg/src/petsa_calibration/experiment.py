"""Typed view over the merged experiment configuration used by the CLI."""

import os
from dataclasses import dataclass, field
from pathlib import Path

from petsa_calibration.checkpoint import checkpoint_path
from petsa_calibration.enums import ForecasterKind, Method, SweepAxis
from petsa_calibration.exceptions import UsageError
from petsa_calibration.tta.engine import AdaptationConfig
from petsa_calibration.utils import resolve_dataset_path


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: Path
    dataset_name: str | None
    split_ratios: tuple[float, float, float] | None
    kind: ForecasterKind
    lookback: int
    horizons: tuple[int, ...]
    methods: tuple[Method, ...]
    adaptation: AdaptationConfig
    checkpoint_dir: Path
    output_dir: Path
    seed: int = 2025
    num_proc: int = 1
    save_predictions: bool = False
    sweep: dict[SweepAxis, list] = field(default_factory=dict)
    borders: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.lookback < 1:
            raise UsageError(f"forecaster.lookback must be >= 1, got {self.lookback}")
        if not self.horizons or min(self.horizons) < 1:
            raise UsageError(f"forecaster.horizons must be positive, got {list(self.horizons)}")
        if not self.methods:
            raise UsageError("adaptation.methods is empty")
        if self.borders is not None and len(self.borders) not in (2, 3):
            raise UsageError(f"dataset.borders must hold 2 or 3 row indices, got {list(self.borders)}")
        if self.num_proc < 1:
            raise UsageError(f"num_proc must be >= 1, got {self.num_proc}")

    @classmethod
    def from_config(
        cls,
        config: dict,
        dataset_path: os.PathLike | str | None = None,
        output_dir: os.PathLike | str | None = None,
        num_proc: int | None = None,
    ) -> "ExperimentConfig":
        """Build from a merged config; explicit arguments win over the matching config keys."""
        fc, output = config["forecaster"], config["output"]
        ratios = config["dataset"]["split_ratios"]
        borders = config["dataset"].get("borders")
        try:
            methods = tuple(Method(m) for m in config["adaptation"]["methods"])
            kind = ForecasterKind(fc["kind"])
            sweep = {axis: list(config["sweep"].get(axis.value) or []) for axis in SweepAxis}
        except ValueError as ex:
            raise UsageError(str(ex)) from ex
        save_predictions = bool(output["save_predictions"])
        return cls(
            dataset_path=resolve_dataset_path(dataset_path or config["dataset"]["path"]),
            dataset_name=config["dataset"]["name"],
            split_ratios=None if ratios is None else tuple(float(r) for r in ratios),
            kind=kind,
            lookback=int(fc["lookback"]),
            horizons=tuple(int(h) for h in fc["horizons"]),
            methods=methods,
            adaptation=AdaptationConfig.from_config(config, store_predictions=save_predictions),
            checkpoint_dir=Path(fc["checkpoint_dir"]),
            output_dir=Path(output_dir or output["directory"]),
            seed=int(fc["seed"]),
            num_proc=int(num_proc or output["num_proc"]),
            save_predictions=save_predictions,
            sweep=sweep,
            borders=None if borders is None else tuple(int(b) for b in borders),
        )

    def checkpoint(self, dataset: str, horizon: int) -> Path:
        return checkpoint_path(self.checkpoint_dir, dataset, self.kind, self.lookback, horizon)

    def sweep_values(self, axis: SweepAxis) -> list:
        values = self.sweep.get(SweepAxis(axis), [])
        if not values:
            raise UsageError(f"sweep.{SweepAxis(axis).value} is empty")
        return values
