import numpy as np
import pytest
from conftest import ETT_HOURLY_BORDERS, ETTH1_PATH, ETTH2_PATH, requires_ett_hourly, requires_etth1

from petsa_calibration import utils
from petsa_calibration.calibration import dense_param_count, petsa_param_count
from petsa_calibration.dataio import DatasetError, load_csv, split_and_normalize, stack_windows
from petsa_calibration.enums import ForecasterKind, LossKind, LossMode, Method, OptimizerKind, Part, SweepAxis
from petsa_calibration.exceptions import UsageError
from petsa_calibration.forecasters import fit_forecaster, fit_ols
from petsa_calibration.losses import LossConfig, petsa_loss
from petsa_calibration.tensorgrad import Tensor, backward
from petsa_calibration.tta.calendar import LabelCalendar
from petsa_calibration.tta.compare import compare_methods, run_sweep, sweep_config
from petsa_calibration.tta.engine import (
    AdaptationAbortedError,
    AdaptationConfig,
    build_calibrated,
    run_tta,
)
from petsa_calibration.tta.optim import (
    NonFiniteGradientError,
    OptimizerConfig,
    OptimizerState,
    apply_gradients,
    optimizer_step,
)
from petsa_calibration.tta.period import PeriodEstimationError, dominant_period, variable_periods

LOOKBACK, HORIZON = 48, 48


@pytest.fixture
def ols(toy_dataset):
    x, y, _ = stack_windows(toy_dataset, Part.TRAIN, LOOKBACK, HORIZON)
    return fit_ols(x, y)


def adapt_config(**kwargs) -> AdaptationConfig:
    kwargs.setdefault("learning_rate", 1e-3)
    return AdaptationConfig(**kwargs)


def test_sgd_step():
    new, state = optimizer_step([np.array([1.0])], [np.array([1.0])], OptimizerState(), OptimizerConfig(kind="sgd", learning_rate=0.1))
    np.testing.assert_allclose(new[0], [0.9])
    assert state.step == 1


def test_adam_first_step_moves_by_the_learning_rate():
    cfg = OptimizerConfig(kind=OptimizerKind.ADAM, learning_rate=0.01)
    new, state = optimizer_step([np.array([1.0, -2.0])], [np.array([1.0, -3.0])], OptimizerState(), cfg)
    np.testing.assert_allclose(new[0], [0.99, -1.99], atol=1e-8)
    assert state.step == 1
    assert len(state.first_moment) == 1


@pytest.mark.parametrize("kind", list(OptimizerKind))
def test_zero_and_missing_gradients_leave_parameters(kind):
    params = [np.array([1.5, -0.5]), np.ones((2, 2))]
    new, _ = optimizer_step(params, [np.zeros(2), None], OptimizerState(), OptimizerConfig(kind=kind))
    for before, after in zip(params, new, strict=True):
        np.testing.assert_array_equal(before, after)


def test_inputs_are_not_modified():
    params = [np.array([1.0, 2.0])]
    grads = [np.array([0.5, 0.5])]
    optimizer_step(params, grads, OptimizerState(), OptimizerConfig())
    np.testing.assert_array_equal(params[0], [1.0, 2.0])
    np.testing.assert_array_equal(grads[0], [0.5, 0.5])


def test_adam_is_deterministic_over_several_steps():
    def run():
        params, state = [np.array([0.3, -0.7])], OptimizerState()
        for i in range(5):
            params, state = optimizer_step(params, [np.array([np.sin(i), np.cos(i)])], state, OptimizerConfig())
        return params[0]

    np.testing.assert_array_equal(run(), run())


def test_bad_gradients_raise():
    with pytest.raises(NonFiniteGradientError):
        optimizer_step([np.zeros(2)], [np.array([1.0, np.nan])], OptimizerState(), OptimizerConfig())
    with pytest.raises(UsageError):
        optimizer_step([np.zeros(2)], [np.zeros(3)], OptimizerState(), OptimizerConfig())
    with pytest.raises(UsageError):
        optimizer_step([np.zeros(2)], [], OptimizerState(), OptimizerConfig())
    with pytest.raises(UsageError):
        OptimizerConfig(learning_rate=-1.0)


def test_apply_gradients_rebinds_tensor_data():
    t = Tensor(np.array([1.0]), requires_grad=True)
    t.grad = np.array([2.0])
    state = apply_gradients([t], OptimizerState(), OptimizerConfig(kind="sgd", learning_rate=0.25))
    np.testing.assert_array_equal(t.data, [0.5])
    assert state.step == 1


def test_single_tone():
    t = np.arange(240)
    assert dominant_period(np.sin(2 * np.pi * t / 24)[:, None]) == 24


def test_larger_amplitude_wins():
    t = np.arange(960)
    series = 3 * np.sin(2 * np.pi * t / 24) + np.sin(2 * np.pi * t / 96)
    assert dominant_period(series[:, None]) == 24


def test_majority_vote_and_ties():
    t = np.arange(480)[:, None]
    daily, half_daily = np.sin(2 * np.pi * t / 24), np.sin(2 * np.pi * t / 12)
    assert dominant_period(np.hstack([daily, daily, half_daily])) == 24
    assert dominant_period(np.hstack([daily, half_daily])) == 12


def test_clamping():
    t = np.arange(400)
    assert dominant_period(np.sin(2 * np.pi * t / 100)[:, None], cap=50) == 50
    assert dominant_period(np.where(t % 2 == 0, 1.0, -1.0)[:, None]) == 2


def test_constant_columns_are_ignored():
    t = np.arange(240)[:, None]
    series = np.hstack([np.full((240, 1), 3.0), np.sin(2 * np.pi * t / 24)])
    np.testing.assert_array_equal(variable_periods(series), [0, 24])
    assert dominant_period(series) == 24


def test_all_constant_series_raise():
    with pytest.raises(PeriodEstimationError, match="default period"):
        dominant_period(np.full((100, 3), 7.0))
    with pytest.raises(PeriodEstimationError):
        dominant_period(np.ones((3, 1)))


def test_observed_prefix_grows_and_saturates():
    calendar = LabelCalendar(np.arange(40.0).reshape(20, 2), horizon=5)
    counts = [calendar.observed(10, s) for s in range(8, 18)]
    assert counts == [0, 0, 0, 1, 2, 3, 4, 5, 5, 5]
    assert not calendar.is_complete(10, 14)
    assert calendar.is_complete(10, 15)
    np.testing.assert_array_equal(calendar.reveal(10, 12), [[20.0, 21.0], [22.0, 23.0]])


def test_poisoned_reveal_pads_with_nan():
    calendar = LabelCalendar(np.arange(40.0).reshape(20, 2), horizon=5, poison=True)
    revealed = calendar.reveal(10, 12)
    assert revealed.shape == (5, 2)
    assert not np.isnan(revealed[:2]).any()
    assert np.isnan(revealed[2:]).all()
    batch = calendar.reveal_batch([9, 10], 12, 2)
    assert batch.shape == (2, 2, 2)
    assert not np.isnan(batch).any()


@pytest.mark.parametrize("method", [Method.PETSA, Method.DENSE_MSE])
def test_zero_learning_rate_matches_frozen(toy_dataset, ols, method):
    cfg = adapt_config(learning_rate=0.0)
    frozen = run_tta(toy_dataset, ols, cfg, Method.FROZEN)
    adapted = run_tta(toy_dataset, ols, cfg, method)
    assert adapted.events
    np.testing.assert_array_equal(adapted.predictions_after, frozen.predictions_after)
    np.testing.assert_array_equal(adapted.per_window_sse, frozen.per_window_sse)
    assert adapted.mse == frozen.mse


def test_first_prediction_is_the_frozen_one(toy_dataset, ols):
    cfg = adapt_config(learning_rate=1e-2)
    frozen = run_tta(toy_dataset, ols, cfg, Method.FROZEN)
    adapted = run_tta(toy_dataset, ols, cfg, Method.PETSA)
    np.testing.assert_array_equal(adapted.predictions_after[0], frozen.predictions_after[0])
    np.testing.assert_array_equal(adapted.predictions_before, frozen.predictions_after)
    assert not np.array_equal(adapted.predictions_after[-1], frozen.predictions_after[-1])


def test_report_bookkeeping(toy_dataset, ols):
    report = run_tta(toy_dataset, ols, adapt_config(), Method.PETSA)
    t_star = np.arange(toy_dataset.val_end, toy_dataset.n_rows - HORIZON + 1)
    np.testing.assert_array_equal(report.t_star, t_star)
    assert report.recomputed_mse() == pytest.approx(report.mse, abs=1e-10)
    recomputed = np.mean((report.predictions_after - stack_windows(toy_dataset, Part.TEST, LOOKBACK, HORIZON)[1]) ** 2)
    assert recomputed == pytest.approx(report.mse, abs=1e-10)
    assert report.recomputed_mae() == pytest.approx(report.mae, abs=1e-10)
    assert report.n_params == petsa_param_count(LOOKBACK, HORIZON, 3, 4)
    assert report.partial_threshold == min(report.period, HORIZON)
    assert report.backbone_checksum == ols.checksum()
    assert set(report.timings) == {"adapt_seconds", "predict_seconds", "total_seconds"}
    assert report.as_dict()["n_windows"] == t_star.size


def test_event_log_is_causal_and_monotone(toy_dataset, ols):
    cfg = adapt_config(partial_threshold=12)
    report = run_tta(toy_dataset, ols, cfg, Method.PETSA)
    steps = [e.step for e in report.events]
    assert all(b > a for a, b in zip(steps, steps[1:]))
    seen = {LossMode.PARTIAL: [], LossMode.TOTAL: []}
    for event in report.events:
        for mode in event.modes:
            for t in event.forecasts[mode.value]:
                assert event.step - t == (12 if mode == LossMode.PARTIAL else HORIZON)
                seen[mode].append(t)
        assert len(event.totals) == cfg.steps_per_event
    for forecasts in seen.values():
        assert len(forecasts) == len(set(forecasts))
    assert report.events[0].step == toy_dataset.val_end + 12
    assert len(seen[LossMode.TOTAL]) == report.n_windows - HORIZON


def test_threshold_at_horizon_only_runs_total_events(toy_dataset, ols):
    report = run_tta(toy_dataset, ols, adapt_config(partial_threshold=500), Method.PETSA)
    assert report.partial_threshold == HORIZON
    assert all(event.modes == (LossMode.TOTAL,) for event in report.events)


def test_poisoned_calendar_changes_nothing(toy_dataset, ols):
    for method in Method:
        clean = run_tta(toy_dataset, ols, adapt_config(), method)
        poisoned = run_tta(toy_dataset, ols, adapt_config(poison_unobserved=True), method)
        assert np.all(np.isfinite(poisoned.per_window_sse))
        np.testing.assert_array_equal(poisoned.predictions_after, clean.predictions_after)


def test_runs_are_deterministic(toy_dataset, ols):
    first = run_tta(toy_dataset, ols, adapt_config(steps_per_event=2), Method.PETSA)
    second = run_tta(toy_dataset, ols, adapt_config(steps_per_event=2), Method.PETSA)
    np.testing.assert_array_equal(first.per_window_sse, second.per_window_sse)
    assert [e.as_dict() for e in first.events] == [e.as_dict() for e in second.events]


def test_zero_beta_equals_disabled_frequency_term(toy_dataset, ols):
    no_beta = adapt_config(loss=LossConfig(beta=0.0))
    no_freq = adapt_config(loss=LossConfig(beta=0.1, freq_enabled=False))
    np.testing.assert_array_equal(
        run_tta(toy_dataset, ols, no_beta).per_window_sse,
        run_tta(toy_dataset, ols, no_freq).per_window_sse,
    )


def test_backbone_is_untouched(toy_dataset, ols):
    before = ols.numpy_parameters()
    run_tta(toy_dataset, ols, adapt_config(learning_rate=1e-2), Method.PETSA)
    run_tta(toy_dataset, ols, adapt_config(learning_rate=1e-2), Method.DENSE_MSE)
    for name, value in ols.numpy_parameters().items():
        np.testing.assert_array_equal(value, before[name])
        assert not ols.parameters[name].requires_grad


def test_exploding_loss_aborts_with_the_event_log(toy_dataset, ols):
    with pytest.raises(AdaptationAbortedError) as excinfo:
        run_tta(toy_dataset, ols, adapt_config(abort_loss=1e-12), Method.PETSA)
    assert len(excinfo.value.events) == 1
    assert excinfo.value.events[0].totals[0] > 1e-12


def test_gradient_step_lowers_the_event_loss(toy_dataset, ols):
    model = build_calibrated(ols, Method.PETSA, adapt_config())
    x, y, _ = stack_windows(toy_dataset, Part.TEST, LOOKBACK, HORIZON)
    config = LossConfig()

    def loss():
        return petsa_loss(model(x[:8]), y[:8], config, LossMode.TOTAL).total

    first = loss()
    backward(first)
    apply_gradients(model.parameters(), OptimizerState(), OptimizerConfig(kind="sgd", learning_rate=1e-4))
    assert loss().item() < first.item()


def test_input_errors(toy_dataset, ols):
    with pytest.raises(UsageError, match="patch_len"):
        run_tta(toy_dataset, ols, adapt_config(loss=LossConfig(patch_len=64)))
    x, y, _ = stack_windows(toy_dataset, Part.TRAIN, LOOKBACK, HORIZON)
    with pytest.raises(DatasetError, match="variables"):
        run_tta(toy_dataset, fit_ols(x[:, :, :2], y[:, :, :2]), adapt_config())
    long = fit_ols(*stack_windows(toy_dataset, Part.TRAIN, 24, 150)[:2])
    with pytest.raises(DatasetError, match="no complete windows"):
        run_tta(toy_dataset, long, adapt_config())


@pytest.mark.parametrize("kwargs", [{"steps_per_event": 0}, {"rank": 0}, {"learning_rate": -1.0}, {"period_cap": 1}])
def test_invalid_config(kwargs):
    with pytest.raises(UsageError):
        AdaptationConfig(**kwargs)


def test_config_from_defaults_file():
    config = utils._load_config(overrides=("adaptation.rank=8", "loss.beta=0.5"))
    cfg = AdaptationConfig.from_config(config, poison_unobserved=True)
    assert cfg.rank == 8
    assert cfg.loss.beta == 0.5
    assert cfg.poison_unobserved
    assert cfg.optimizer == OptimizerKind.ADAM
    assert isinstance(cfg.learning_rate, float)


def test_comparison_table(toy_dataset, ols):
    cfg = adapt_config()
    reports, table = compare_methods(toy_dataset, ols, cfg)
    assert list(table["method"]) == ["frozen", "dense_mse", "petsa"]
    counts = dict(zip(table["method"], table["n_params"], strict=True))
    assert counts == {
        "frozen": 0,
        "dense_mse": dense_param_count(HORIZON, 3),
        "petsa": petsa_param_count(LOOKBACK, HORIZON, 3, 4),
    }
    ratio = dense_param_count(HORIZON, 3) / petsa_param_count(LOOKBACK, HORIZON, 3, 4)
    np.testing.assert_allclose(table["param_ratio_dense_petsa"], ratio)
    np.testing.assert_allclose(table["memory_mb"], table["n_params"] * 8 / 2**20)
    assert reports[Method.FROZEN].events == []

    _, again = compare_methods(toy_dataset, ols, cfg)
    columns = ["method", "mse", "mae", "n_params"]
    assert again[columns].equals(table[columns])


def test_parallel_comparison_matches_serial(toy_dataset, ols):
    cfg = adapt_config()
    serial, _ = compare_methods(toy_dataset, ols, cfg, [Method.FROZEN, Method.PETSA])
    parallel, _ = compare_methods(toy_dataset, ols, cfg, [Method.FROZEN, Method.PETSA], num_proc=2)
    for method, report in serial.items():
        np.testing.assert_array_equal(parallel[method].per_window_sse, report.per_window_sse)


def test_sweep_config_replaces_one_field():
    cfg = adapt_config()
    assert sweep_config(cfg, SweepAxis.BETA, 0.5).loss.beta == 0.5
    assert sweep_config(cfg, SweepAxis.LOSS, "mse").loss.kind == LossKind.MSE
    assert sweep_config(cfg, SweepAxis.RANK, 8).rank == 8
    assert sweep_config(cfg, "alpha0", 0.1).alpha0 == 0.1
    assert cfg.rank == 4 and cfg.loss.beta == 0.1


def test_rank_sweep_parameter_counts_increase(toy_dataset, ols):
    reports = run_sweep(toy_dataset, ols, adapt_config(), SweepAxis.RANK, [1, 2, 4])
    counts = [r.n_params for r in reports]
    assert counts == [petsa_param_count(LOOKBACK, HORIZON, 3, r) for r in (1, 2, 4)]
    assert all(np.isfinite(r.mse) for r in reports)
    with pytest.raises(UsageError):
        run_sweep(toy_dataset, ols, adapt_config(), SweepAxis.RANK, [])


@requires_etth1
@pytest.mark.order("last")
def test_etth1_ols_horizon_96():
    ds = split_and_normalize(load_csv(ETTH1_PATH))
    assert (ds.n_rows, ds.n_vars) == (17420, 7)
    x, y, _ = stack_windows(ds, Part.TRAIN, 96, 96)
    f = fit_ols(x, y)
    cfg = AdaptationConfig(poison_unobserved=True)
    frozen = run_tta(ds, f, cfg, Method.FROZEN)
    adapted = run_tta(ds, f, cfg, Method.PETSA)
    assert abs(frozen.mse - 0.451) <= 0.03
    assert adapted.mse <= frozen.mse * (1 - 0.005)


@requires_ett_hourly
@pytest.mark.order("last")
def test_petsa_dominates_on_ett_hourly():
    config = utils._load_config()
    cfg = AdaptationConfig.from_config(config, store_predictions=False)
    cells = []
    for path in (ETTH1_PATH, ETTH2_PATH):
        ds = split_and_normalize(load_csv(path), borders=ETT_HOURLY_BORDERS)
        for kind in (ForecasterKind.OLS, ForecasterKind.DLINEAR):
            for horizon in (96, 192, 336, 720):
                x, y, _ = stack_windows(ds, Part.TRAIN, 96, horizon)
                f = fit_forecaster(kind, x, y, config["forecaster"])
                reports, _ = compare_methods(ds, f, cfg, num_proc=3)
                cells.append({method: report.mse for method, report in reports.items()})
    assert len(cells) == 16
    beats_frozen = sum(c[Method.PETSA] <= c[Method.FROZEN] for c in cells)
    beats_dense = sum(c[Method.PETSA] <= c[Method.DENSE_MSE] for c in cells)
    assert beats_frozen >= 0.8 * len(cells)
    assert beats_dense >= 0.5 * len(cells)
