"""Online test-time adaptation over the chronological test stream.

At every wall-clock step ``s`` (the first target row of the window forecast
at ``s``) the engine first runs at most one adaptation event, built from
forecasts whose labels became usable at ``s``, and then records the forecast
for ``s``. A forecast issued at ``t`` joins the partial batch once
``threshold`` of its rows are known (``s = t + threshold``) and the total
batch once the whole horizon is known (``s = t + H``). Both batches of a step
are summed into one objective.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from tqdm import tqdm

from petsa_calibration.calibration import (
    CalibrationModule,
    DenseCalibrationModule,
    memory_mb,
)
from petsa_calibration.dataio import Dataset, DatasetError, stack_windows
from petsa_calibration.enums import LossKind, LossMode, Method, OptimizerKind, Part, Side
from petsa_calibration.exceptions import NumericalError, UsageError
from petsa_calibration.forecasters import Forecaster, predict
from petsa_calibration.losses import LossConfig, LossReport, petsa_loss
from petsa_calibration.tensorgrad import Tensor, backward
from petsa_calibration.tta.calendar import LabelCalendar
from petsa_calibration.tta.optim import OptimizerConfig, OptimizerState, apply_gradients
from petsa_calibration.tta.period import dominant_period


class AdaptationAbortedError(NumericalError):
    def __init__(self, message: str, events: list | None = None):
        super().__init__(message)
        self.events = events or []


@dataclass(frozen=True)
class AdaptationConfig:
    optimizer: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-3
    steps_per_event: int = 1
    rank: int = 4
    alpha0: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    period_cap: int = 720
    partial_threshold: int | None = None
    seed: int = 2025
    poison_unobserved: bool = False
    abort_loss: float = 1e6
    store_predictions: bool = True

    def __post_init__(self):
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        if self.learning_rate < 0:
            raise UsageError(f"adaptation learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps_per_event < 1:
            raise UsageError(f"steps_per_event must be >= 1, got {self.steps_per_event}")
        if self.rank < 1:
            raise UsageError(f"rank must be >= 1, got {self.rank}")
        if self.period_cap < 2:
            raise UsageError(f"period_cap must be >= 2, got {self.period_cap}")
        if self.partial_threshold is not None and self.partial_threshold < 1:
            raise UsageError(f"partial_threshold must be >= 1, got {self.partial_threshold}")

    @property
    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer, learning_rate=self.learning_rate)

    @classmethod
    def from_config(cls, config: dict, **overrides) -> "AdaptationConfig":
        """Build from the ``adaptation`` and ``loss`` sections of a merged config."""
        adaptation, loss = config["adaptation"], config["loss"]
        stride = loss.get("patch_stride")
        threshold = adaptation.get("partial_threshold")
        kwargs = {
            "optimizer": adaptation["optimizer"],
            "learning_rate": float(adaptation["learning_rate"]),
            "steps_per_event": int(adaptation["steps_per_event"]),
            "rank": int(adaptation["rank"]),
            "alpha0": float(adaptation["alpha0"]),
            "loss": LossConfig(
                delta=float(loss["delta"]),
                beta=float(loss["beta"]),
                patch_len=int(loss["patch_len"]),
                patch_stride=None if stride is None else int(stride),
                kind=loss["kind"],
                freq_enabled=bool(loss["freq_enabled"]),
            ),
            "period_cap": int(adaptation["period_cap"]),
            "partial_threshold": None if threshold is None else int(threshold),
            "seed": int(adaptation["seed"]),
            "poison_unobserved": bool(adaptation["poison_unobserved"]),
            "abort_loss": float(adaptation["abort_loss"]),
        }
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class AdaptationEvent:
    step: int
    modes: tuple[LossMode, ...]
    forecasts: dict[str, list[int]]
    losses: dict[str, dict]
    totals: list[float]

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "modes": [m.value for m in self.modes],
            "forecasts": self.forecasts,
            "losses": self.losses,
            "totals": self.totals,
        }


@dataclass
class RunReport:
    method: Method
    dataset: str
    forecaster: str
    lookback: int
    horizon: int
    n_vars: int
    t_star: np.ndarray
    per_window_sse: np.ndarray
    per_window_sae: np.ndarray
    mse: float
    mae: float
    n_params: int
    period: int | None
    partial_threshold: int | None
    events: list[AdaptationEvent]
    backbone_checksum: str
    timings: dict[str, float]
    predictions_before: np.ndarray | None = None
    predictions_after: np.ndarray | None = None
    # adapted calibration modules in their final state, empty for frozen runs
    modules: list = field(default_factory=list)

    @property
    def n_windows(self) -> int:
        return int(self.t_star.size)

    @property
    def memory_mb(self) -> float:
        return memory_mb(self.n_params)

    def recomputed_mse(self) -> float:
        return float(self.per_window_sse.sum() / (self.n_windows * self.horizon * self.n_vars))

    def recomputed_mae(self) -> float:
        return float(self.per_window_sae.sum() / (self.n_windows * self.horizon * self.n_vars))

    def as_dict(self) -> dict:
        """JSON-ready view; prediction arrays are left to a separate sidecar file."""
        return {
            "method": self.method.value,
            "dataset": self.dataset,
            "forecaster": self.forecaster,
            "lookback": self.lookback,
            "horizon": self.horizon,
            "n_vars": self.n_vars,
            "n_windows": self.n_windows,
            "mse": self.mse,
            "mae": self.mae,
            "n_params": self.n_params,
            "memory_mb": self.memory_mb,
            "period": self.period,
            "partial_threshold": self.partial_threshold,
            "backbone_checksum": self.backbone_checksum,
            "t_star": self.t_star.tolist(),
            "per_window_sse": self.per_window_sse.tolist(),
            "per_window_sae": self.per_window_sae.tolist(),
            "events": [e.as_dict() for e in self.events],
            "timings": self.timings,
        }


class CalibratedForecaster:
    """A frozen forecaster with optional input and output calibration modules."""

    def __init__(self, forecaster: Forecaster, input_module=None, output_module=None):
        self.forecaster = forecaster
        self.input_module = input_module
        self.output_module = output_module

    @property
    def modules(self) -> list:
        return [m for m in (self.input_module, self.output_module) if m is not None]

    def parameters(self) -> list[Tensor]:
        return [p for m in self.modules for p in m.parameters()]

    @property
    def n_params(self) -> int:
        return sum(m.param_count for m in self.modules)

    def __call__(self, x) -> Tensor:
        z = self.input_module(x) if self.input_module is not None else x
        y = predict(self.forecaster, z)
        return self.output_module(y) if self.output_module is not None else y


def build_calibrated(f: Forecaster, method: Method, cfg: AdaptationConfig) -> CalibratedForecaster:
    method = Method(method)
    if method == Method.FROZEN:
        return CalibratedForecaster(f)
    if method == Method.DENSE_MSE:
        return CalibratedForecaster(f, output_module=DenseCalibrationModule(f.horizon, f.n_vars))
    return CalibratedForecaster(
        f,
        input_module=CalibrationModule.init(
            Side.INPUT, f.lookback, f.n_vars, cfg.rank, cfg.alpha0, seed=cfg.seed
        ),
        output_module=CalibrationModule.init(
            Side.OUTPUT, f.horizon, f.n_vars, cfg.rank, cfg.alpha0, seed=cfg.seed + 1
        ),
    )


def _method_loss(method: Method, cfg: AdaptationConfig) -> LossConfig:
    if method == Method.DENSE_MSE:
        return LossConfig(kind=LossKind.MSE)
    return cfg.loss


def _adaptation_event(
    model: CalibratedForecaster,
    batches: dict[LossMode, list[int]],
    n_rows: dict[LossMode, int],
    step: int,
    x_by_t: dict[int, np.ndarray],
    calendar: LabelCalendar,
    loss_config: LossConfig,
    cfg: AdaptationConfig,
    state: OptimizerState,
    events: list[AdaptationEvent],
) -> OptimizerState:
    params = model.parameters()
    totals = []
    losses = {}
    for _ in range(cfg.steps_per_event):
        objective = None
        reports: dict[LossMode, LossReport] = {}
        for mode, t_stars in batches.items():
            x = Tensor(np.stack([x_by_t[t] for t in t_stars]))
            target = calendar.reveal_batch(t_stars, step, n_rows[mode])
            reports[mode] = petsa_loss(model(x), target, loss_config, mode)
            objective = reports[mode].total if objective is None else objective + reports[mode].total
        total = objective.item()
        totals.append(total)
        if not losses:
            losses = {mode.value: report.as_dict() for mode, report in reports.items()}
        if not np.isfinite(total) or total > cfg.abort_loss:
            events.append(_make_event(step, batches, losses, totals))
            raise AdaptationAbortedError(
                f"adaptation aborted at step {step}: loss {total} "
                f"(NaN or above {cfg.abort_loss}); lower the learning rate",
                events,
            )
        backward(objective)
        state = apply_gradients(params, state, cfg.optimizer_config)
    events.append(_make_event(step, batches, losses, totals))
    logger.trace(f"step {step}: modes {[m.value for m in batches]} loss {totals[0]:.6f}")
    return state


def _make_event(step, batches, losses, totals) -> AdaptationEvent:
    return AdaptationEvent(
        step=step,
        modes=tuple(batches),
        forecasts={mode.value: list(t_stars) for mode, t_stars in batches.items()},
        losses=losses,
        totals=list(totals),
    )


def run_tta(
    ds: Dataset,
    f: Forecaster,
    cfg: AdaptationConfig,
    method: Method = Method.PETSA,
    show_progress: bool = False,
) -> RunReport:
    """Stream the test split through ``f`` with the given adaptation method.

    :param ds: Split and normalized dataset.
    :param f: Frozen forecaster matching the dataset's variables.
    :param cfg: Adaptation hyperparameters.
    :param method: ``frozen`` predicts only, ``dense_mse`` and ``petsa`` adapt.
    :raises AdaptationAbortedError: On a NaN or exploding loss.
    """
    method = Method(method)
    if f.n_vars != ds.n_vars:
        raise DatasetError(f"forecaster has {f.n_vars} variables, dataset {ds.name} has {ds.n_vars}")
    lookback, horizon = f.lookback, f.horizon
    x_all, y_all, t_stars = stack_windows(ds, Part.TEST, lookback, horizon)
    if t_stars.size == 0:
        raise DatasetError(f"test split of {ds.name} has no complete windows for H={horizon}")

    loss_config = _method_loss(method, cfg)
    period = None
    threshold = None
    if method != Method.FROZEN:
        if loss_config.kind == LossKind.PETSA and loss_config.patch_len > horizon:
            raise UsageError(f"patch_len {loss_config.patch_len} exceeds the horizon {horizon}")
        if cfg.partial_threshold is None:
            period = dominant_period(ds.part_values(Part.TRAIN), cfg.period_cap)
            threshold = min(period, horizon)
        else:
            threshold = min(cfg.partial_threshold, horizon)
        logger.debug(f"{method.value} H={horizon}: period {period}, partial threshold {threshold}")

    model = build_calibrated(f, method, cfg)
    calendar = LabelCalendar(ds.values, horizon, poison=cfg.poison_unobserved)
    x_by_t = {int(t): x_all[i] for i, t in enumerate(t_stars)}
    checksum = f.checksum()

    n_windows = t_stars.size
    per_window_sse = np.empty(n_windows)
    per_window_sae = np.empty(n_windows)
    before = np.empty_like(y_all) if cfg.store_predictions else None
    after = np.empty_like(y_all) if cfg.store_predictions else None
    events: list[AdaptationEvent] = []
    state = OptimizerState()
    adapt_seconds = 0.0
    predict_seconds = 0.0
    start_time = time.perf_counter()

    for i, step in enumerate(tqdm(t_stars.tolist(), desc=f"{method.value} H={horizon}", disable=not show_progress)):
        if method != Method.FROZEN:
            batches: dict[LossMode, list[int]] = {}
            n_rows: dict[LossMode, int] = {}
            if threshold < horizon and step - threshold in x_by_t:
                batches[LossMode.PARTIAL] = [step - threshold]
                n_rows[LossMode.PARTIAL] = threshold
            if step - horizon in x_by_t:
                batches[LossMode.TOTAL] = [step - horizon]
                n_rows[LossMode.TOTAL] = horizon
            if batches:
                tic = time.perf_counter()
                state = _adaptation_event(
                    model, batches, n_rows, step, x_by_t, calendar, loss_config, cfg, state, events
                )
                adapt_seconds += time.perf_counter() - tic

        tic = time.perf_counter()
        x = Tensor(x_all[i : i + 1])
        pred = model(x).data[0]
        predict_seconds += time.perf_counter() - tic
        err = pred - y_all[i]
        per_window_sse[i] = np.sum(err * err)
        per_window_sae[i] = np.sum(np.abs(err))
        if cfg.store_predictions:
            before[i] = predict(f, x).data[0] if method != Method.FROZEN else pred
            after[i] = pred

    if f.checksum() != checksum:
        raise NumericalError("backbone parameters changed during adaptation")

    n_values = n_windows * horizon * ds.n_vars
    report = RunReport(
        method=method,
        dataset=ds.name,
        forecaster=f.KIND.value,
        lookback=lookback,
        horizon=horizon,
        n_vars=ds.n_vars,
        t_star=t_stars,
        per_window_sse=per_window_sse,
        per_window_sae=per_window_sae,
        mse=float(per_window_sse.sum() / n_values),
        mae=float(per_window_sae.sum() / n_values),
        n_params=model.n_params,
        period=period,
        partial_threshold=threshold,
        events=events,
        backbone_checksum=checksum,
        timings={
            "adapt_seconds": adapt_seconds,
            "predict_seconds": predict_seconds,
            "total_seconds": time.perf_counter() - start_time,
        },
        predictions_before=before,
        predictions_after=after,
        modules=model.modules,
    )
    logger.info(
        f"{ds.name} {f.KIND.value} H={horizon} {method.value}: MSE {report.mse:.4f} "
        f"MAE {report.mae:.4f} over {n_windows} windows, {len(events)} adaptation events"
    )
    return report
