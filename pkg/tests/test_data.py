import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mat_forecast.data import (
    TimeSeriesDataset,
    batches,
    chronological_split,
    count_windows,
    fit_scaler,
    linear_series,
    load_cache,
    load_csv,
    prepare,
    save_cache,
    split_lengths,
    two_tone_series,
    windows,
    write_csv,
)
from mat_forecast.errors import ConfigError, DataError

JENA_CHANNELS = [
    "p (mbar)", "T (degC)", "Tpot (K)", "Tdew (degC)", "rh (%)", "VPmax (mbar)", "VPact (mbar)",
    "VPdef (mbar)", "sh (g/kg)", "H2OC (mmol/mol)", "rho (g/m**3)", "wv (m/s)", "max. wv (m/s)",
    "wd (deg)", "rain (mm)", "raining (s)", "SWDR (W/m^2)", "PAR (umol/m^2/s)",
    "max. PAR (umol/m^2/s)", "Tlog (degC)", "CO2 (ppm)",
]  # fmt: skip


def series(n, M=2):
    return TimeSeriesDataset(
        np.arange(M * n, dtype=float).reshape(M, n), [f"t{i}" for i in range(n)], [f"c{m}" for m in range(M)]
    )


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- loading -----------------------------------------------------------------------------------


def test_load_three_rows(tmp_path):
    p = write(
        tmp_path,
        "Date Time,a,b\n01.01.2009 00:10:00,1.0,2.0\n01.01.2009 00:20:00,3.0,4.0\n01.01.2009 00:30:00,5.0,6.0\n",
    )
    ds = load_csv(p)
    assert ds.values.shape == (2, 3) and ds.channel_names == ["a", "b"]
    np.testing.assert_array_equal(ds.values, [[1, 3, 5], [2, 4, 6]])
    assert ds.timestamps[0] == "2009-01-01T00:10:00"


def test_load_iso_timestamps_and_named_column(tmp_path):
    p = write(tmp_path, "x,when\n1.5,2020-01-01 00:00:00\n2.5,2020-01-01 01:00:00\n")
    ds = load_csv(p, time_column="when")
    np.testing.assert_array_equal(ds.values, [[1.5, 2.5]])


def test_forward_fill_and_leading_backfill(tmp_path):
    p = write(tmp_path, "t,a,b\n2020-01-01,1,\n2020-01-02,,5\n2020-01-03,nan,6\n2020-01-04,4,7\n")
    ds = load_csv(p)
    np.testing.assert_array_equal(ds.values, [[1, 1, 1, 4], [5, 5, 6, 7]])
    with pytest.raises(DataError, match="strict"):
        load_csv(p, impute="strict")


def test_malformed_row_reports_line(tmp_path):
    p = write(tmp_path, "t,a\n2020-01-01,1\n2020-01-02,oops\n")
    with pytest.raises(DataError, match=r"d\.csv:3"):
        load_csv(p)
    p = write(tmp_path, "t,a\n2020-01-01,1,2\n", "e.csv")
    with pytest.raises(DataError, match=r"e\.csv:2"):
        load_csv(p)


def test_non_increasing_timestamps_rejected(tmp_path):
    p = write(tmp_path, "t,a\n2020-01-02,1\n2020-01-01,2\n")
    with pytest.raises(DataError, match="not increasing"):
        load_csv(p)
    p = write(tmp_path, "t,a\n2020-01-01,1\n2020-01-01,2\n", "dup.csv")
    with pytest.raises(DataError):
        load_csv(p)


def test_missing_file_and_column(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv")
    p = write(tmp_path, "t,a\n2020-01-01,1\n")
    with pytest.raises(DataError):
        load_csv(p, time_column="zzz")


def test_jena_layout_fixture(tmp_path):
    r = np.random.default_rng(0)
    base = two_tone_series(50, M=21, seed=1)
    ds = TimeSeriesDataset(base.values + r.standard_normal((21, 50)), base.timestamps, JENA_CHANNELS, "jena")
    write_csv(ds, tmp_path / "jena.csv")
    assert (tmp_path / "jena.csv").read_text().startswith("Date Time,p (mbar),T (degC)")
    loaded = load_csv(tmp_path / "jena.csv")
    assert loaded.n_channels == 21 and loaded.channel_names == JENA_CHANNELS
    np.testing.assert_array_equal(loaded.values, ds.values)


def test_load_is_idempotent_and_cache_round_trips(tmp_path):
    write_csv(linear_series(40, 3), tmp_path / "s.csv")
    a, b = load_csv(tmp_path / "s.csv"), load_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(a.values, b.values)
    assert a.timestamps == b.timestamps
    save_cache(a, tmp_path / "cache")
    c = load_cache(tmp_path / "cache")
    np.testing.assert_array_equal(c.values, a.values)
    assert (c.timestamps, c.channel_names, c.name) == (a.timestamps, a.channel_names, a.name)


# -- splits and windows -------------------------------------------------------------------------


def test_split_lengths_example():
    assert split_lengths(1000, (0.7, 0.1, 0.2)) == (700, 100, 200)
    parts = chronological_split(series(1000))
    assert [len(p) for p in parts] == [700, 100, 200]
    assert parts[1].values[0, 0] == 700 and parts[2].values[0, 0] == 800


@given(st.integers(1, 5000), st.floats(0.05, 0.9), st.floats(0, 0.5))
def test_split_partitions_in_order(n, r_train, r_val):
    r_val = min(r_val, 1 - r_train)
    ratios = (r_train, r_val, 1 - r_train - r_val)
    parts = chronological_split(series(n, 1), ratios)
    assert sum(len(p) for p in parts) == n
    flat = np.concatenate([p.values[0] for p in parts])
    np.testing.assert_array_equal(flat, np.arange(n))


def test_split_rejects_bad_ratios():
    for ratios in [(0.5, 0.6, 0.1), (0.0, 0.5, 0.5), (0.5, 0.5)]:
        with pytest.raises(ConfigError):
            split_lengths(100, ratios)


def test_empty_validation_split_has_no_windows():
    _, val, _ = chronological_split(series(100), (1.0, 0.0, 0.0))
    assert len(val) == 0
    with pytest.raises(DataError):
        windows(val, 4, 2)


def test_window_count_examples():
    assert len(windows(series(300), 96, 96)) == 109
    assert len(windows(chronological_split(series(300))[0], 1, 1)) == 209
    assert count_windows(192, 96, 96) == 1 and len(windows(series(192), 96, 96)) == 1
    train = chronological_split(series(300))[0]
    assert len(windows(train, 96, 96)) == 19
    with pytest.raises(DataError):
        windows(series(191), 96, 96)


def brute_force_windows(values, L, T):
    out = []
    for s in range(values.shape[1]):
        if s + L + T <= values.shape[1]:
            out.append((values[:, s : s + L], values[:, s + L : s + L + T]))
    return out


@given(st.integers(2, 120), st.integers(1, 30), st.integers(1, 30))
def test_window_count_property(n, L, T):
    ds = series(n)
    expected = brute_force_windows(ds.values, L, T)
    assert count_windows(n, L, T) == len(expected)
    if expected:
        ws = windows(ds, L, T)
        assert len(ws) == len(expected)
        for sample, (x, y) in zip(ws, expected):
            np.testing.assert_array_equal(sample.x, x)
            np.testing.assert_array_equal(sample.y, y)
            # target follows look-back with no gap
            assert sample.y[0, 0] == sample.x[0, -1] + 1


def test_windows_stay_inside_their_split():
    n, L, T = 500, 24, 12
    ds = series(n, 1)
    for part in chronological_split(ds):
        ws = windows(part, L, T)
        lo, hi = part.values[0, 0], part.values[0, -1]
        assert ws.x.min() >= lo and ws.y.max() <= hi


def test_batches_cover_all_and_keep_partial():
    ws = windows(series(60), 5, 5)
    sizes = [len(b) for b in batches(ws, 16)]
    assert sizes == [16, 16, 16, 3]
    seen = np.concatenate([b.origins for b in batches(ws, 16, shuffle=True, seed=3)])
    assert sorted(seen) == list(range(len(ws)))
    again = np.concatenate([b.origins for b in batches(ws, 16, shuffle=True, seed=3)])
    np.testing.assert_array_equal(seen, again)
    with pytest.raises(ConfigError):
        next(batches(ws, 0))


# -- scaling ----------------------------------------------------------------------------------------


def test_scaler_properties():
    ds = two_tone_series(400, 3, seed=2)
    ds.values[1] = 4.0
    data = prepare(ds, 8, 4)
    train = chronological_split(ds)[0]
    scaler = fit_scaler(train)
    scaled = scaler.transform(train.values)
    np.testing.assert_allclose(scaled[[0, 2]].mean(1), 0.0, atol=1e-12)
    np.testing.assert_allclose(scaled[[0, 2]].std(1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(scaled[1], 0.0)
    np.testing.assert_allclose(scaler.inverse(scaled), train.values, atol=1e-12)
    np.testing.assert_array_equal(data.scaler.mean, scaler.mean)


def test_prepare_uses_train_statistics_only():
    ds = series(400, 2)
    data = prepare(ds, 8, 4)
    np.testing.assert_array_equal(data.scaler.mean, ds.values[:, :280].mean(1))
    assert len(data.train) == 280 - 11 and len(data.val) == 40 - 11 and len(data.test) == 80 - 11


def test_prepare_rejects_short_split():
    with pytest.raises(DataError, match="val"):
        prepare(series(300), 96, 96)


def test_synthetic_generators_are_seeded():
    np.testing.assert_array_equal(two_tone_series(100, seed=4).values, two_tone_series(100, seed=4).values)
    assert not np.array_equal(two_tone_series(100, seed=4).values, two_tone_series(100, seed=5).values)
    lin = linear_series(100, 2)
    np.testing.assert_allclose(np.diff(lin.values, 2, axis=1), 0.0, atol=1e-12)
