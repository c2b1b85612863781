"""Dataset container, disk format, splits, windows, synthetic generator."""

import json

import numpy as np
import pytest

from stmamba.data import (
    Standardizer,
    TrafficTensor,
    calendar_indices,
    convert_csv,
    load_dataset,
    make_windows,
    save_dataset,
    split_dataset,
    standardize,
    steps_per_day,
    synthesize_traffic,
)
from stmamba.errors import (
    DataError,
    DegenerateFeatureError,
    InsufficientDataError,
)


def _small_dataset(t=60, n=3, d=2, interval=5, start=0):
    gen = np.random.default_rng(5)
    values = gen.uniform(10.0, 50.0, size=(t, n, d)).astype(np.float32)
    dow, tod = calendar_indices(start, t, interval)
    return TrafficTensor(values, dow, tod, interval, start)


# ---------------------------------------------------------------------------
# calendar
# ---------------------------------------------------------------------------

def test_steps_per_day_requires_divisor_of_day():
    assert steps_per_day(5) == 288
    assert steps_per_day(60) == 24
    with pytest.raises(DataError):
        steps_per_day(7)
    with pytest.raises(DataError):
        steps_per_day(0)


def test_epoch_starts_on_thursday():
    dow, tod = calendar_indices(0, 1, 5)
    assert dow[0] == 3 and tod[0] == 0


def test_calendar_day_rollover():
    # start at 23:55 on 1970-01-01: next slot is Friday 00:00
    start = 23 * 3600 + 55 * 60
    dow, tod = calendar_indices(start, 2, 5)
    assert list(tod) == [287, 0]
    assert list(dow) == [3, 4]


def test_calendar_week_wraps_to_monday():
    # 1970-01-05 was a Monday
    dow, _ = calendar_indices(4 * 86400, 1, 5)
    assert dow[0] == 0


def test_calendar_ranges_and_monotone_slots():
    dow, tod = calendar_indices(1234 * 60, 1000, 5)
    assert dow.min() >= 0 and dow.max() <= 6
    assert tod.min() >= 0 and tod.max() <= 287
    jumps = np.diff(tod.astype(np.int64)) % 288
    assert (jumps == 1).all()


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def test_traffic_tensor_rejects_wrong_rank():
    with pytest.raises(DataError):
        TrafficTensor(np.zeros((4, 3)), np.zeros(4, int), np.zeros(4, int))


def test_slice_steps_advances_start_time():
    data = _small_dataset(t=20, interval=5, start=1000 * 60)
    part = data.slice_steps(4, 10)
    assert part.n_steps == 6
    assert part.start_unix_seconds == 1000 * 60 + 4 * 5 * 60
    np.testing.assert_array_equal(part.values, data.values[4:10])
    np.testing.assert_array_equal(part.day_of_week, data.day_of_week[4:10])


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def test_save_load_roundtrip_bit_exact(tmp_path):
    data = _small_dataset()
    save_dataset(tmp_path / "ds", data)
    back = load_dataset(tmp_path / "ds")
    assert back.values.dtype == np.float32
    np.testing.assert_array_equal(back.values, data.values)
    np.testing.assert_array_equal(back.day_of_week, data.day_of_week)
    np.testing.assert_array_equal(back.time_of_day, data.time_of_day)
    assert back.interval_minutes == data.interval_minutes
    assert back.start_unix_seconds == data.start_unix_seconds


def test_data_bin_is_headerless_row_major(tmp_path):
    data = _small_dataset(t=4, n=2, d=1)
    save_dataset(tmp_path / "ds", data)
    raw = np.fromfile(tmp_path / "ds" / "data.bin", dtype="<f4")
    assert raw.size == 4 * 2 * 1
    np.testing.assert_array_equal(raw.reshape(4, 2, 1), data.values)


def test_load_missing_files(tmp_path):
    with pytest.raises(DataError, match="missing"):
        load_dataset(tmp_path / "nowhere")


def test_load_size_mismatch_names_both_numbers(tmp_path):
    data = _small_dataset(t=4, n=2, d=1)
    save_dataset(tmp_path / "ds", data)
    with open(tmp_path / "ds" / "data.bin", "ab") as fh:
        fh.write(b"\x00\x00\x00\x00")
    with pytest.raises(DataError) as err:
        load_dataset(tmp_path / "ds")
    assert "36" in str(err.value) and "32" in str(err.value)


def test_load_rejects_non_finite_with_offset(tmp_path):
    data = _small_dataset(t=4, n=2, d=1)
    data.values[2, 1, 0] = np.nan
    save_dataset(tmp_path / "ds", data)
    with pytest.raises(DataError) as err:
        load_dataset(tmp_path / "ds")
    assert "5" in str(err.value)   # scalar offset 2*2 + 1


def test_meta_json_is_stable(tmp_path):
    data = _small_dataset()
    save_dataset(tmp_path / "a", data)
    save_dataset(tmp_path / "b", data)
    assert (tmp_path / "a" / "meta.json").read_bytes() == \
        (tmp_path / "b" / "meta.json").read_bytes()
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert meta["T"] == 60 and meta["N"] == 3 and meta["d"] == 2


# ---------------------------------------------------------------------------
# conversion
# ---------------------------------------------------------------------------

def test_convert_csv_roundtrip(tmp_path):
    csv_path = tmp_path / "export.csv"
    rows = np.arange(24, dtype=np.float32).reshape(6, 4)
    csv_path.write_text("\n".join(",".join(str(v) for v in row) for row in rows))
    data = convert_csv(csv_path, tmp_path / "ds", n_sensors=2, n_features=2)
    assert data.values.shape == (6, 2, 2)
    back = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.values.reshape(6, 4), rows)


def test_convert_csv_rejects_bad_width(tmp_path):
    csv_path = tmp_path / "export.csv"
    csv_path.write_text("1,2,3\n4,5\n")
    with pytest.raises(DataError, match="columns"):
        convert_csv(csv_path, tmp_path / "ds", n_sensors=3)


def test_convert_csv_rejects_non_numeric(tmp_path):
    csv_path = tmp_path / "export.csv"
    csv_path.write_text("1,2\n3,oops\n")
    with pytest.raises(DataError):
        convert_csv(csv_path, tmp_path / "ds", n_sensors=2)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

def test_standardizer_roundtrip():
    data = _small_dataset()
    stats = Standardizer.fit(data)
    z = stats.transform(data.values)
    assert abs(z.reshape(-1, 2).mean(axis=0)).max() < 1e-5
    back = stats.inverse(z)
    np.testing.assert_allclose(back, data.values, atol=1e-4)
    assert back.dtype == np.float32


def test_standardize_keeps_original_untouched():
    data = _small_dataset()
    kept = data.values.copy()
    out = standardize(data, Standardizer.fit(data))
    np.testing.assert_array_equal(data.values, kept)
    assert out.values.std() == pytest.approx(1.0, abs=1e-3)


def test_standardizer_rejects_constant_feature():
    data = _small_dataset()
    data.values[:, :, 1] = 7.0
    with pytest.raises(DegenerateFeatureError) as err:
        Standardizer.fit(data)
    assert "1" in str(err.value)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def test_split_arithmetic_full_scale():
    data = _small_dataset(t=17856, n=1, d=1)
    tr, va, te = split_dataset(data, (0.6, 0.2, 0.2))
    assert (tr.n_steps, va.n_steps, te.n_steps) == (10713, 3571, 3572)


def test_split_remainder_goes_to_test():
    data = _small_dataset(t=10)
    tr, va, te = split_dataset(data, (0.5, 0.25, 0.25))
    assert (tr.n_steps, va.n_steps, te.n_steps) == (5, 2, 3)


def test_split_concatenation_recovers_everything():
    data = _small_dataset(t=101)
    tr, va, te = split_dataset(data, (0.6, 0.2, 0.2))
    glued = np.concatenate([tr.values, va.values, te.values], axis=0)
    np.testing.assert_array_equal(glued, data.values)


def test_split_rejects_bad_ratios():
    data = _small_dataset(t=50)
    with pytest.raises(ValueError, match="sum to 1"):
        split_dataset(data, (0.6, 0.2, 0.3))
    with pytest.raises(ValueError, match="positive"):
        split_dataset(data, (1.2, -0.1, -0.1))


def test_split_rejects_too_short_segment():
    data = _small_dataset(t=30)
    with pytest.raises(InsufficientDataError, match="train split has 18"):
        split_dataset(data, (0.6, 0.2, 0.2), min_length=24)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

def test_window_count_and_alignment():
    data = _small_dataset(t=30)
    windows = make_windows(data, history=12, horizon=12)
    assert len(windows) == 30 - 12 - 12 + 1
    for i, w in enumerate(windows):
        np.testing.assert_array_equal(w.history, data.values[i:i + 12])
        np.testing.assert_array_equal(w.target, data.values[i + 12:i + 24])
        np.testing.assert_array_equal(w.history_tod, data.time_of_day[i:i + 12])


def test_windows_require_enough_steps():
    data = _small_dataset(t=23)
    with pytest.raises(InsufficientDataError):
        make_windows(data, history=12, horizon=12)
    assert len(make_windows(data, history=12, horizon=11)) == 1


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synth_shapes_and_calendar():
    data = synthesize_traffic(4, 3, seed=0)
    assert data.values.shape == (3 * 288, 4, 1)
    assert data.values.dtype == np.float32
    assert (data.values >= 0.0).all()
    assert data.day_of_week[0] == 0        # generator starts on a Monday
    assert data.time_of_day[0] == 0


def test_synth_is_deterministic_per_seed():
    a = synthesize_traffic(4, 3, seed=9)
    b = synthesize_traffic(4, 3, seed=9)
    c = synthesize_traffic(4, 3, seed=10)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_synth_daily_autocorrelation_beats_half_day():
    data = synthesize_traffic(6, 10, seed=3)
    x = data.values[:, :, 0].astype(np.float64)
    x = x - x.mean(axis=0)
    for s in range(x.shape[1]):
        col = x[:, s]
        full = float(np.dot(col, col))
        lag_day = float(np.dot(col[:-288], col[288:])) / full
        lag_half = float(np.dot(col[:-144], col[144:])) / full
        assert lag_day > lag_half


def test_synth_zero_noise_repeats_weekdays_exactly():
    data = synthesize_traffic(3, 4, seed=1, noise=0.0)
    # days 0..3 are Mon..Thu: same day type, so same values at equal slots
    day = 288
    np.testing.assert_array_equal(data.values[:day], data.values[day:2 * day])
    np.testing.assert_array_equal(data.values[:day], data.values[2 * day:3 * day])


def test_synth_weekend_dip_visible_without_noise():
    data = synthesize_traffic(2, 7, seed=1, noise=0.0)
    weekday = data.values[data.day_of_week < 5]
    weekend = data.values[data.day_of_week >= 5]
    assert weekday.mean() > weekend.mean()


def test_synth_validates_arguments():
    with pytest.raises(ValueError):
        synthesize_traffic(0, 3, seed=0)
    with pytest.raises(ValueError):
        synthesize_traffic(3, 1, seed=0)
