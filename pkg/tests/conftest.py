import datetime as dt
import warnings

import numpy as np
import pytest

from evforecast.data import HouseholdSeries, TimeTable, WeatherSeries, prepare
from evforecast.synth import SynthConfig, generate

# acceptance outcomes collected for the end-of-run summary
_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    n, title = marker
    current = _ACCEPTANCE.get(n, (title, None))[1]
    if report.failed:
        status = "FAIL"
    elif report.skipped:
        status = current or "SKIP"
    elif report.when == "call":
        status = current or "PASS"
    else:
        return
    _ACCEPTANCE[n] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}")


def hourly(start, n):
    return np.datetime64(start, "m") + np.arange(n) * np.timedelta64(60, "m")


def table_from(consumption, temperature=None, start="2019-01-07T00:00"):
    """Merged table over a plain hourly grid outside any DST change."""
    consumption = np.asarray(consumption, dtype=np.float64)
    n = consumption.size
    temperature = np.linspace(-5, 5, n) if temperature is None else temperature
    return TimeTable.build(hourly(start, n), np.ones(n, dtype=int), temperature, consumption)


@pytest.fixture(scope="session")
def seed42_full():
    """Seed-42 household over the default two-year range."""
    return generate(SynthConfig(seed=42))


def slice_series(household, stations, start, stop):
    lo, hi = np.datetime64(start, "m"), np.datetime64(stop, "m")

    def sel(ts):
        return (ts >= lo) & (ts < hi)

    hh = HouseholdSeries(household.household_id, household.timestamps[sel(household.timestamps)],
                         household.consumption[sel(household.timestamps)])
    st = [WeatherSeries(s.station_id, s.timestamps[sel(s.timestamps)], s.temperature[sel(s.timestamps)])
          for s in stations]
    return hh, st


@pytest.fixture(scope="session")
def small_prepared():
    """About six weeks of synthetic data, prepared."""
    hh, st = generate(SynthConfig(seed=7, start=dt.datetime(2019, 1, 1), end=dt.datetime(2019, 2, 10)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return prepare(hh, st)
