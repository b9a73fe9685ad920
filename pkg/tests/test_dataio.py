import numpy as np
import pytest
from conftest import synthetic_series, write_csv

from petsa_calibration.dataio import (
    Dataset,
    DatasetError,
    default_split_ratios,
    load_csv,
    split_and_normalize,
    stack_windows,
    windows,
)
from petsa_calibration.enums import Part


def test_load_toy_csv(tmp_path):
    path = write_csv(tmp_path / "toy.csv", np.arange(20.0).reshape(10, 2), columns=["a", "b"])
    ds = load_csv(path)
    assert ds.name == "toy"
    assert ds.n_rows == 10
    assert ds.n_vars == 2
    assert ds.columns == ("a", "b")
    np.testing.assert_array_equal(ds.values[:, 1], np.arange(1.0, 20.0, 2.0))
    assert not ds.is_split


def test_nan_cell_names_row_and_column(tmp_path):
    path = tmp_path / "holes.csv"
    path.write_text("date,OT,HUFL\n2016-07-01 00:00:00,1.0,2.0\n2016-07-01 01:00:00,3.0,NaN\n")
    with pytest.raises(DatasetError, match=r"missing value 'NaN'.*row 2, column 'HUFL'"):
        load_csv(path)


def test_non_numeric_cell_is_rejected(tmp_path):
    path = tmp_path / "text.csv"
    path.write_text("date,OT\n2016-07-01 00:00:00,1.0\n2016-07-01 01:00:00,hot\n")
    with pytest.raises(DatasetError, match="non-numeric value 'hot'"):
        load_csv(path)


def test_too_few_rows_and_missing_file(tmp_path):
    path = write_csv(tmp_path / "short.csv", np.ones((4, 1)))
    with pytest.raises(DatasetError, match="fewer than the 5 required"):
        load_csv(path, min_rows=5)
    with pytest.raises(DatasetError, match="not found"):
        load_csv(tmp_path / "absent.csv")


def test_default_split_ratios_depend_on_family():
    assert default_split_ratios("ETTh1") == (0.6, 0.2, 0.2)
    assert default_split_ratios("ettm2") == (0.6, 0.2, 0.2)
    assert default_split_ratios("weather") == (0.7, 0.1, 0.2)


def test_train_split_is_standardized(toy_dataset):
    train = toy_dataset.part_values(Part.TRAIN)
    assert toy_dataset.train_end == int(600 * 0.7)
    assert toy_dataset.val_end == toy_dataset.train_end + int(600 * 0.1)
    assert np.all(np.abs(train.mean(axis=0)) < 1e-9)
    np.testing.assert_allclose(train.std(axis=0), 1.0, atol=1e-9)
    assert np.all(np.isfinite(toy_dataset.part_values(Part.TEST)))


def test_normalization_round_trip(toy_dataset, rng):
    raw = rng.standard_normal((50, toy_dataset.n_vars)) * 10.0
    back = toy_dataset.denormalize(toy_dataset.normalize(raw))
    assert np.max(np.abs(back - raw)) < 1e-12


def test_constant_column_is_clamped_and_flagged():
    values = synthetic_series(n_rows=100, n_vars=2, seed=3)
    values[:, 1] = 4.0
    ds = split_and_normalize(Dataset(name="flat", values=values, columns=("wave", "flat")))
    assert ds.constant_columns == ("flat",)
    assert ds.std[1] == 1.0
    assert np.all(ds.values[:, 1] == 0.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"ratios": (0.5, 0.5, 0.0)},
        {"ratios": (0.6, 0.2)},
        {"ratios": (0.5, 0.2, 0.2)},
        {"borders": (10, 10)},
        {"borders": (5,)},
        {"borders": (5, 10, 15, 20)},
        {"borders": (5, 10, 21)},
    ],
)
def test_bad_splits_raise(kwargs):
    ds = Dataset(name="x", values=np.ones((20, 1)), columns=("a",))
    with pytest.raises(DatasetError):
        split_and_normalize(ds, **kwargs)


def test_third_border_drops_trailing_rows():
    values = np.arange(40, dtype=np.float64)[:, None]
    timestamps = tuple(str(i) for i in range(40))
    ds = Dataset(name="ramp", values=values, columns=("v",), timestamps=timestamps)
    split = split_and_normalize(ds, borders=(20, 25, 30))
    assert split.n_rows == len(split.timestamps) == 30
    assert split.part_bounds(Part.TEST) == (25, 30)
    # statistics come from the first 20 rows only
    assert split.mean[0] == pytest.approx(9.5)
    np.testing.assert_allclose(split.values[:, 0] * split.std[0] + split.mean[0], np.arange(30))


def _split(n_train: int, n_rows: int = 200) -> Dataset:
    values = np.arange(n_rows, dtype=np.float64)[:, None]
    return split_and_normalize(
        Dataset(name="ramp", values=values, columns=("v",)), borders=(n_train, n_train + 20)
    )


def test_part_of_length_lookback_plus_horizon_gives_one_pair():
    pairs = windows(_split(12), Part.TRAIN, lookback=8, horizon=4)
    assert len(pairs) == 1
    assert pairs[0].t_star == 8


def test_five_extra_rows_give_six_pairs():
    assert len(windows(_split(17), Part.TRAIN, lookback=8, horizon=4)) == 6


def test_short_part_gives_no_pairs():
    ds = _split(100)
    assert windows(ds, Part.VAL, lookback=16, horizon=8) == []
    x, y, t_star = stack_windows(ds, Part.VAL, lookback=16, horizon=8)
    assert x.shape == (0, 16, 1)
    assert y.shape == (0, 8, 1)
    assert t_star.shape == (0,)


def test_first_test_lookback_reaches_into_validation():
    ds = _split(100)
    first = windows(ds, Part.TEST, lookback=24, horizon=8)[0]
    assert first.t_star == ds.val_end
    np.testing.assert_array_equal(first.x, ds.values[ds.val_end - 24 : ds.val_end])
    np.testing.assert_array_equal(first.y, ds.values[ds.val_end : ds.val_end + 8])


def test_windows_are_in_bounds_and_chronological():
    rng = np.random.default_rng(11)
    ds = _split(100)
    for _ in range(50):
        lookback, horizon, stride = (int(v) for v in rng.integers(1, 30, size=3))
        for part in Part:
            start, end = ds.part_bounds(part)
            pairs = windows(ds, part, lookback, horizon, stride)
            t_stars = [p.t_star for p in pairs]
            assert all(b > a for a, b in zip(t_stars, t_stars[1:]))
            for pair in pairs:
                assert pair.t_star - lookback >= 0
                assert pair.t_star >= start
                assert pair.t_star + horizon <= end <= ds.n_rows
                assert pair.x.shape == (lookback, 1)
                assert pair.y.shape == (horizon, 1)
                # values are a normalized ramp, so contiguity shows up as constant steps
                assert np.allclose(np.diff(np.concatenate([pair.x, pair.y])[:, 0]), ds.values[1, 0] - ds.values[0, 0])


def test_stack_windows_matches_pairs(toy_dataset):
    pairs = windows(toy_dataset, Part.TEST, lookback=24, horizon=12, stride=5)
    x, y, t_star = stack_windows(toy_dataset, Part.TEST, lookback=24, horizon=12, stride=5)
    assert x.shape == (len(pairs), 24, 3)
    assert y.shape == (len(pairs), 12, 3)
    for i, pair in enumerate(pairs):
        np.testing.assert_array_equal(x[i], pair.x)
        np.testing.assert_array_equal(y[i], pair.y)
        assert t_star[i] == pair.t_star


def test_invalid_window_sizes_raise(toy_dataset):
    with pytest.raises(DatasetError):
        windows(toy_dataset, Part.TEST, lookback=0, horizon=4)


def test_unsplit_dataset_has_no_parts():
    with pytest.raises(DatasetError, match="not been split"):
        Dataset(name="raw", values=np.ones((5, 1)), columns=("a",)).part_bounds(Part.TRAIN)
