import datetime as dt
import warnings

import numpy as np
import pytest

from evforecast.data import write_household_csv, write_weather_csv, prepare
from evforecast.errors import ConfigError
from evforecast.synth import SynthConfig, generate, generate_components, local_hours

SHORT = dict(start=dt.datetime(2019, 10, 1), end=dt.datetime(2019, 12, 1))


def test_same_seed_identical_csv(tmp_path):
    paths = []
    for run in range(2):
        hh, st = generate(SynthConfig(seed=5, **SHORT))
        d = tmp_path / str(run)
        d.mkdir()
        write_household_csv(hh, d / "h.csv")
        write_weather_csv(st, d / "w.csv")
        paths.append(d)
    for name in ("h.csv", "w.csv"):
        assert (paths[0] / name).read_bytes() == (paths[1] / name).read_bytes()
    other, _ = generate(SynthConfig(seed=6, **SHORT))
    assert not np.array_equal(other.consumption, hh.consumption)


def test_table2_range_row_count(seed42_full):
    hh, st = seed42_full
    assert len(hh.timestamps) == 17521
    assert str(hh.timestamps[0]) == "2018-07-22T00:00" and str(hh.timestamps[-1]) == "2020-07-21T00:00"
    assert all(len(s.timestamps) == 17521 for s in st) and len(st) == 2


def test_calendar_duplicates_and_gaps(seed42_full):
    hh, _ = seed42_full
    ts = hh.timestamps
    uniq, counts = np.unique(ts, return_counts=True)
    assert [str(t) for t in uniq[counts == 2]] == ["2018-11-04T01:00", "2019-11-03T01:00"]
    skipped = [np.datetime64(t) for t in ("2019-03-10T02:00", "2020-03-08T02:00")]
    assert not any(np.isin(skipped, ts))


def test_local_hours_counts():
    # a spring-forward day has 23 wall hours, a fall-back day 25
    wall, std = local_hours(dt.datetime(2019, 3, 10), dt.datetime(2019, 3, 10, 23))
    assert len(wall) == 23
    wall, std = local_hours(dt.datetime(2019, 11, 3), dt.datetime(2019, 11, 3, 23))
    assert len(wall) == 25 and np.all(np.diff(std) == np.timedelta64(60, "m"))


def test_no_ev_bound():
    cfg = SynthConfig(seed=3, ev_sessions_per_week=0, **SHORT)
    parts = generate_components(cfg)
    y = parts["household"].consumption
    assert not parts["ev_active"].any()
    assert np.all(y <= parts["base"] + parts["hvac"] + 4 * cfg.noise_std_kw + 1e-9)


def test_non_negative_and_ev_detectable():
    cfg = SynthConfig(seed=11, noise_std_kw=2.0, base_load_kw=0.2, **SHORT)
    parts = generate_components(cfg)
    y = parts["household"].consumption
    assert y.min() >= 0.0 and (y == 0).any()  # heavy noise hits the floor
    on = parts["ev_active"]
    assert y[on].mean() - y[~on].mean() >= cfg.ev_charger_kw / 2


def test_missing_rate():
    parts = generate_components(SynthConfig(seed=1, missing_temp_rate=0.2, **SHORT))
    frac = np.mean([np.isnan(s.temperature).mean() for s in parts["weather"]])
    assert 0.15 < frac < 0.25


def test_streams_are_independent():
    a = generate_components(SynthConfig(seed=9, ev_sessions_per_week=1, **SHORT))
    b = generate_components(SynthConfig(seed=9, ev_sessions_per_week=10, **SHORT))
    assert np.array_equal(a["true_temperature"], b["true_temperature"])
    assert not np.array_equal(a["ev_active"], b["ev_active"])


def test_level_shift():
    start = dt.datetime(2019, 11, 15)
    a = generate_components(SynthConfig(seed=2, **SHORT))
    b = generate_components(SynthConfig(seed=2, level_shift_kw=1.5, level_shift_start=start, **SHORT))
    after = a["household"].timestamps >= np.datetime64(start)
    diff = b["household"].consumption - a["household"].consumption
    assert np.allclose(diff[~after], 0) and np.allclose(diff[after], 1.5, atol=1e-4)


@pytest.mark.parametrize("bad", [dict(ev_charger_kw=-1), dict(missing_temp_rate=1.0),
                                 dict(end=dt.datetime(2018, 1, 1)), dict(n_stations=0),
                                 dict(ev_plug_in_hour_distribution=(1,) * 23)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        SynthConfig(**bad).validate()


def test_pipeline_accepts_without_warnings():
    hh, st = generate(SynthConfig(seed=42, missing_temp_rate=0.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        prep = prepare(hh, st)
    assert prep.stats.dropped == ()
