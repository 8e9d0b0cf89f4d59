import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from flowcast import dataflow as df
from flowcast.errors import (ConfigurationError, DataError, ImputationError,
                             NormalizationError, ParseError)

MONDAY = dt.date(2016, 3, 7)


def _series(n_days=5, start=MONDAY, seed=0):
    rng = np.random.default_rng(seed)
    days = df.weekday_dates(start, n_days)
    values = rng.integers(0, 500, size=(n_days, 36, 3)).astype(float)
    return df.FlowSeries(days, values, np.zeros(values.shape, dtype=bool))


def _write(tmp_path, lines, name="d.csv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


# ingestion -------------------------------------------------------------------

def test_load_csv_round_trip(tmp_path):
    s = _series(3)
    df.write_csv(s, tmp_path / "a.csv")
    back = df.load_csv(tmp_path / "a.csv")
    assert back.days == s.days
    np.testing.assert_array_equal(back.values, s.values)
    assert not back.missing.any()


def test_load_csv_drops_off_hours_and_marks_gaps(tmp_path):
    p = _write(tmp_path, ["timestamp,subway,taxi,bus",
                          "2016-03-07T04:30,1,2,3",
                          "2016-03-07T05:00,10,20,30",
                          "2016-03-07T23:00,1,1,1",
                          "2016-03-07T22:30,5,6,7"])
    s = df.load_csv(p)
    assert s.dropped_rows == 2
    assert s.n_days == 1
    np.testing.assert_array_equal(s.values[0, 0], [10, 20, 30])
    np.testing.assert_array_equal(s.values[0, 35], [5, 6, 7])
    assert s.missing[0, 1:35].all() and not s.missing[0, [0, 35]].any()


@pytest.mark.parametrize("lines, line", [
    (["time,subway,taxi,bus"], 1),
    (["timestamp,subway,taxi,bus", "2016-03-07T05:00,1,2"], 2),
    (["timestamp,subway,taxi,bus", "2016-03-07T05:00,1,2,3", "nonsense,1,2,3"], 3),
    (["timestamp,subway,taxi,bus", "2016-03-07T05:10,1,2,3"], 2),
    (["timestamp,subway,taxi,bus", "2016-03-07T05:00,1,x,3"], 2),
    (["timestamp,subway,taxi,bus", "2016-03-07T05:00,1,-2,3"], 2),
])
def test_load_csv_parse_errors_carry_line(tmp_path, lines, line):
    with pytest.raises(ParseError) as info:
        df.load_csv(_write(tmp_path, lines))
    assert info.value.line == line


def test_load_csv_duplicate_timestamp(tmp_path):
    p = _write(tmp_path, ["timestamp,subway,taxi,bus", "2016-03-07T05:00,1,2,3", "2016-03-07T05:00,1,2,3"])
    with pytest.raises(DataError, match="duplicate"):
        df.load_csv(p)


# cleaning ---------------------------------------------------------------------

def test_filter_weekdays_removes_weekend():
    days = [MONDAY + dt.timedelta(days=i) for i in range(7)]
    s = df.FlowSeries(days, np.ones((7, 36, 3)), np.zeros((7, 36, 3), dtype=bool))
    out = df.filter_weekdays(s)
    assert [d.weekday() for d in out.days] == [0, 1, 2, 3, 4]


def test_filter_weekdays_empty_is_error():
    sat = dt.date(2016, 3, 12)
    s = df.FlowSeries([sat], np.ones((1, 36, 3)), np.zeros((1, 36, 3), dtype=bool))
    with pytest.raises(DataError):
        df.filter_weekdays(s)


def test_impute_uses_same_weekday_mean():
    days = [MONDAY, MONDAY + dt.timedelta(days=1), MONDAY + dt.timedelta(days=7), MONDAY + dt.timedelta(days=14)]
    values = np.zeros((4, 36, 3))
    values[0, 10, 1], values[2, 10, 1] = 100.0, 120.0
    values[1, 10, 1] = 9999.0  # a Tuesday: must not donate
    missing = np.zeros(values.shape, dtype=bool)
    missing[3, 10, 1] = True
    out = df.impute_missing(df.FlowSeries(days, values, missing))
    assert out.values[3, 10, 1] == 110.0
    assert not out.missing.any()


def test_impute_without_donor_names_the_slot():
    days = [MONDAY]
    missing = np.zeros((1, 36, 3), dtype=bool)
    missing[0, 4, 2] = True
    with pytest.raises(ImputationError, match="Monday slot 4 mode bus"):
        df.impute_missing(df.FlowSeries(days, np.ones((1, 36, 3)), missing))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.0, 0.3))
def test_impute_idempotent_and_preserves_observed(seed, frac):
    s = _series(10, seed=seed)
    rng = np.random.default_rng(seed)
    missing = rng.random(s.values.shape) < frac
    # keep the first week complete so every cell has a donor
    missing[:5] = False
    s = s.replace(missing=missing, values=np.where(missing, 0.0, s.values))
    once = df.impute_missing(s)
    twice = df.impute_missing(once)
    np.testing.assert_array_equal(once.values, twice.values)
    np.testing.assert_array_equal(once.values[~missing], s.values[~missing])


# normalization ----------------------------------------------------------------

def test_normalization_maps_range_to_unit_interval():
    s = _series(4)
    p = df.fit_normalization(s)
    n = df.normalize(s, p).values
    np.testing.assert_allclose(n.reshape(-1, 3).min(axis=0), -1.0)
    np.testing.assert_allclose(n.reshape(-1, 3).max(axis=0), 1.0)


def test_normalization_constant_is_error():
    s = df.FlowSeries([MONDAY], np.full((1, 36, 3), 7.0), np.zeros((1, 36, 3), dtype=bool))
    with pytest.raises(NormalizationError):
        df.fit_normalization(s)


@settings(max_examples=100, deadline=None)
@given(v=hnp.arrays(np.float64, (7, 3), elements=st.floats(-1e6, 1e6)),
       lo=hnp.arrays(np.float64, 3, elements=st.floats(0, 1e4)),
       span=hnp.arrays(np.float64, 3, elements=st.floats(1.0, 1e4)))
def test_normalize_denormalize_round_trip(v, lo, span):
    p = df.NormalizationParams(lo, lo + span)
    back = df.denormalize(df.normalize_values(v, p), p)
    assert np.all(np.abs(back - v) <= 1e-12 * np.maximum(1.0, np.abs(v)) + 1e-12 * np.abs(lo + span))


def test_normalization_fitted_on_training_range_only():
    s = _series(10)
    s.values[-1, 20, 0] = 1e6  # a test-period spike must not move the scale
    split = df.prepare_dataset(s, 12)
    assert split.norm.max[0] < 1e6
    first_test = split.test[0]
    # the training range ends exactly at the last training target
    last_train = split.train[-1]
    flat = s.values.reshape(-1, 3)
    stop = last_train.target_index + 1
    np.testing.assert_array_equal(split.norm.max, flat[:stop].max(axis=0))
    assert first_test.target_index > last_train.target_index


# windowing ----------------------------------------------------------------------

@pytest.mark.parametrize("days, L, expected", [(1, 12, 24), (5, 12, 120), (3, 1, 105), (2, 35, 2)])
def test_window_counts(days, L, expected):
    assert len(df.sliding_window(_series(days), L)) == expected


@settings(max_examples=40, deadline=None)
@given(days=st.integers(1, 6), L=st.integers(1, 35))
def test_window_count_law(days, L):
    assert len(df.sliding_window(_series(days), L)) == days * (36 - L)


@pytest.mark.parametrize("L", [0, 36, 40, 2.5])
def test_window_bad_length(L):
    with pytest.raises(ConfigurationError):
        df.sliding_window(_series(1), L)


def test_window_indexing_oracle():
    s = _series(3)
    n = df.normalize(s, df.fit_normalization(s))
    flat = n.values.reshape(-1, 3)
    for L in (5, 12):
        for smp in df.sliding_window(n, L):
            t = smp.target_index
            for r in range(3):
                for c in range(L):
                    assert smp.X[r, c] == flat[t - L + c, r]
                assert smp.y[r] == flat[t, r]


def test_windows_never_cross_midnight():
    for smp in df.sliding_window(_series(3), 12):
        assert smp.slot >= 12


# splitting ------------------------------------------------------------------------

def test_split_counts_120():
    assert df.split_counts(120) == (84, 12, 24)


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.7, 0.2, 0.2), (0.8, 0.0, 0.2), (1.2, -0.1, -0.1)])
def test_split_bad_ratios(ratios):
    with pytest.raises(ConfigurationError):
        df.split_counts(100, ratios)


def test_split_too_small():
    with pytest.raises(ConfigurationError):
        df.split_counts(3)


@settings(max_examples=30, deadline=None)
@given(days=st.integers(1, 8), L=st.integers(3, 20))
def test_split_disjoint_and_chronological(days, L):
    s = _series(days)
    try:
        split = df.prepare_dataset(s, L)
    except ConfigurationError:
        assume_small = days * (36 - L) < 10
        assert assume_small
        return
    parts = [split.train, split.validation, split.test]
    keys = [[(x.day, x.slot) for x in p] for p in parts]
    assert sum(map(len, keys)) == days * (36 - L)
    assert max(keys[0]) < min(keys[1]) and max(keys[1]) < min(keys[2])


# synthetic data ---------------------------------------------------------------------

def test_synth_default_shape_and_weekdays():
    s = df.synthesize(seed=0)
    assert s.values.shape == (25, 36, 3)
    assert all(d.weekday() < 5 for d in s.days)
    assert np.all(s.values >= 0) and np.all(s.values == np.round(s.values))


def test_synth_deterministic():
    a, b = df.synthesize(seed=3), df.synthesize(seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, df.synthesize(seed=4).values)


def test_synth_noiseless_peaks_at_centers():
    cfg = df.SynthConfig(n_days=2).noiseless()
    s = df.synthesize(cfg, seed=0)
    for m, name in enumerate(df.MODES):
        p = cfg.modes[name]
        peak = int(np.argmax(s.values[0, :, m]))
        assert peak in (p.morning, p.evening)


def test_taxi_defaults_relative_to_subway():
    modes = df.SynthConfig().modes
    assert modes["taxi"].morning == modes["subway"].morning + 1
    assert modes["taxi"].evening == modes["subway"].evening + 1
    assert modes["taxi"].width == modes["subway"].width * 1.5


def test_synth_daily_total_ordering():
    cfg = df.SynthConfig(n_days=3).noiseless()
    # independent oracle: the two bumps sampled on integer slots, summed in closed loop
    expected = {}
    for name, p in cfg.modes.items():
        total = 0.0
        for s in range(36):
            for c in (p.morning, p.evening):
                total += p.amplitude * math.exp(-0.5 * ((s - c) / p.width) ** 2)
            total += p.base
        expected[name] = total
    got = df.synthesize(cfg, seed=0).values.sum(axis=1)[0]
    for m, name in enumerate(df.MODES):
        assert abs(got[m] - expected[name]) <= 36 * 0.5
    assert expected["subway"] > expected["taxi"] > expected["bus"]
    assert got[0] > got[1] > got[2]


@pytest.mark.parametrize("field, value", [("amplitude", 0.0), ("width", -1.0), ("noise", -0.1)])
def test_synth_bad_profile(field, value):
    cfg = df.SynthConfig()
    setattr(cfg.modes["bus"], field, value)
    with pytest.raises(ConfigurationError):
        df.synthesize(cfg)


def test_synth_config_ini(tmp_path):
    p = tmp_path / "s.ini"
    p.write_text("[general]\nn_days = 5\npeak_jitter = 0\n[taxi]\namplitude = 900\n", encoding="utf-8")
    cfg = df.load_synth_config(p)
    assert cfg.n_days == 5 and cfg.peak_jitter == 0 and cfg.modes["taxi"].amplitude == 900
    p.write_text("[taxi]\ncolour = red\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        df.load_synth_config(p)
