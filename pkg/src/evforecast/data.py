"""Weather and smart-meter preparation, feature engineering, splitting,
z-score scaling and sliding windows.

Timestamps are naive local wall-clock times held as ``datetime64[m]``. The
fall-back hour appears twice in local data; a binary DST flag (0 while DST
is in effect, 1 otherwise) makes ``(timestamp, dst_flag)`` a unique key.
"""
import datetime as dt
import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (
    DataCorruptionError,
    DataError,
    EmptyDatasetError,
    GapError,
    ShapeError,
)

HOUR = np.timedelta64(60, "m")

CALENDAR_FEATURES = (
    "day_of_week", "quarter", "month", "day_of_year", "day_of_month",
    "week_of_year", "hour_of_day", "year", "dst_flag",
)
TABLE_COLUMNS = ("timestamp", "dst_flag", "temperature", "consumption") + CALENDAR_FEATURES[:-1]
# model inputs; consumption first so the target column is index 0
MODEL_FEATURES = ("consumption", "temperature") + CALENDAR_FEATURES
UNSCALED_FEATURES = ("dst_flag",)
WINDOW_CHOICES = (12, 24, 48, 72)

FEATURE_RANGES = {
    "day_of_week": (0, 6), "quarter": (1, 4), "month": (1, 12), "day_of_year": (1, 366),
    "day_of_month": (1, 31), "week_of_year": (0, 53), "hour_of_day": (0, 23), "dst_flag": (0, 1),
}


class DataWarning(UserWarning):
    pass


def to_datetime64(values):
    return pd.to_datetime(pd.Series(values)).to_numpy().astype("datetime64[m]")


@dataclass
class WeatherSeries:
    station_id: str
    timestamps: np.ndarray
    temperature: np.ndarray  # NaN marks a missing reading

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps).astype("datetime64[m]")
        self.temperature = np.asarray(self.temperature, dtype=np.float64)
        if self.timestamps.shape != self.temperature.shape:
            raise ShapeError("WeatherSeries", self.timestamps.shape, self.temperature.shape)


@dataclass
class HouseholdSeries:
    household_id: str
    timestamps: np.ndarray
    consumption: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps).astype("datetime64[m]")
        self.consumption = np.asarray(self.consumption, dtype=np.float64)
        if self.timestamps.shape != self.consumption.shape:
            raise ShapeError("HouseholdSeries", self.timestamps.shape, self.consumption.shape)
        if np.any(self.consumption < 0):
            raise DataError(f"household {self.household_id}: negative consumption")


# --- CSV interfaces -------------------------------------------------------

def read_household_csv(path, household_id=None):
    frame = pd.read_csv(path, dtype={"consumption_kwh": float})
    missing = {"interval_start", "consumption_kwh"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    if frame["consumption_kwh"].isna().any():
        raise DataError(f"{path}: empty consumption values")
    hid = household_id or str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return HouseholdSeries(hid, to_datetime64(frame["interval_start"]), frame["consumption_kwh"].to_numpy())


def read_weather_csv(path):
    """Return one :class:`WeatherSeries` per station in the file."""
    frame = pd.read_csv(path, dtype={"station_id": str, "temperature_c": float})
    missing = {"station_id", "timestamp", "temperature_c"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    out = []
    for sid, grp in frame.groupby("station_id", sort=True):
        out.append(WeatherSeries(sid, to_datetime64(grp["timestamp"]), grp["temperature_c"].to_numpy()))
    return out


def _fmt_ts(ts):
    return np.datetime_as_string(ts, unit="m")


def write_household_csv(series, path):
    with open(path, "w", newline="") as fh:
        fh.write("interval_start,consumption_kwh\n")
        for ts, v in zip(_fmt_ts(series.timestamps), series.consumption):
            fh.write(f"{ts},{v:.4f}\n")


def write_weather_csv(series_list, path):
    with open(path, "w", newline="") as fh:
        fh.write("station_id,timestamp,temperature_c\n")
        for s in series_list:
            for ts, v in zip(_fmt_ts(s.timestamps), s.temperature):
                fh.write(f"{s.station_id},{ts},{'' if np.isnan(v) else f'{v:.1f}'}\n")


# --- weather preparation --------------------------------------------------

def fill_missing_temperature(ws):
    """Fill gaps by inverse-distance weighting of the nearest readings.

    Distance is counted in readings (hours). A gap touching either end of
    the series takes the single nearest reading.
    """
    temp = ws.temperature.copy()
    present = np.flatnonzero(~np.isnan(temp))
    if present.size == 0:
        raise GapError(f"station {ws.station_id}: no temperature readings to fill from")
    missing = np.flatnonzero(np.isnan(temp))
    if missing.size:
        nxt = np.searchsorted(present, missing)
        for idx, k in zip(missing, nxt):
            before = present[k - 1] if k > 0 else None
            after = present[k] if k < present.size else None
            if before is None:
                temp[idx] = temp[after]
            elif after is None:
                temp[idx] = temp[before]
            else:
                w_b = 1.0 / (idx - before)
                w_a = 1.0 / (after - idx)
                temp[idx] = (w_b * temp[before] + w_a * temp[after]) / (w_b + w_a)
    return WeatherSeries(ws.station_id, ws.timestamps.copy(), temp)


def average_stations(stations):
    if not stations:
        raise DataError("no weather stations given")
    grid = stations[0].timestamps
    for s in stations[1:]:
        if s.timestamps.shape != grid.shape or np.any(s.timestamps != grid):
            a, b = set(_fmt_ts(grid)), set(_fmt_ts(s.timestamps))
            gaps = sorted(a ^ b)
            raise DataError(
                f"station {s.station_id} grid differs from {stations[0].station_id}; "
                f"timestamps not shared: {gaps[:10]}{' ...' if len(gaps) > 10 else ''}",
                stage="average_stations")
        if np.isnan(s.temperature).any():
            raise GapError(f"station {s.station_id} still has missing readings")
    mean = np.mean(np.vstack([s.temperature for s in stations]), axis=0)
    return WeatherSeries("mean", grid.copy(), mean)


# --- daylight saving --------------------------------------------------------

def _nth_sunday(year, month, n):
    d = dt.date(year, month, 1)
    first = d + dt.timedelta(days=(6 - d.weekday()) % 7)
    return first + dt.timedelta(weeks=n - 1)


@dataclass(frozen=True)
class DstRule:
    """Region DST transitions, as nth Sunday of a month at a local hour.

    The default (second Sunday of March to first Sunday of November at
    02:00) is the current North American rule used in Ontario.
    """

    start_month: int = 3
    start_sunday: int = 2
    end_month: int = 11
    end_sunday: int = 1
    hour: int = 2

    def transitions(self, year):
        """Wall-clock start of DST and the wall-clock hour that repeats at its end."""
        start = dt.datetime.combine(_nth_sunday(year, self.start_month, self.start_sunday),
                                    dt.time(self.hour))
        repeat = dt.datetime.combine(_nth_sunday(year, self.end_month, self.end_sunday),
                                     dt.time(self.hour - 1))
        return np.datetime64(start, "m"), np.datetime64(repeat, "m")


DEFAULT_DST = DstRule()


def dst_annotate(timestamps, rule=DEFAULT_DST):
    """Flag each wall-clock timestamp: 0 inside DST, 1 outside.

    In the repeated fall-back hour the first occurrence is DST (0) and the
    second is standard time (1).
    """
    ts = np.asarray(timestamps).astype("datetime64[m]")
    years = ts.astype("datetime64[Y]").astype(int) + 1970
    flags = np.ones(ts.shape, dtype=np.int8)
    ambiguous = np.zeros(ts.shape, dtype=bool)
    for y in np.unique(years):
        sel = years == y
        start, repeat = rule.transitions(int(y))
        t = ts[sel]
        flags[sel] = np.where((t >= start) & (t < repeat), 0, 1)
        ambiguous[sel] = (t >= repeat) & (t < repeat + HOUR)
    seen = {}
    for idx in np.flatnonzero(ambiguous):
        key = ts[idx]
        n = seen.get(key, 0)
        if n >= 2:
            raise DataCorruptionError(f"timestamp {key} occurs more than twice")
        flags[idx] = n  # first occurrence 0 (DST), second 1
        seen[key] = n + 1
    uniq, counts = np.unique(ts[~ambiguous], return_counts=True)
    if np.any(counts > 1):
        bad = uniq[counts > 1][:5]
        raise DataCorruptionError(f"duplicate timestamps outside the fall-back hour: {bad}")
    return flags


def to_standard_time(timestamps, dst_flags):
    """Map wall-clock time to a monotone standard-time axis."""
    ts = np.asarray(timestamps).astype("datetime64[m]")
    return ts - np.where(np.asarray(dst_flags) == 0, HOUR, np.timedelta64(0, "m"))


# --- merged table -----------------------------------------------------------

def week_of_year(ts):
    """Monday-based week number, 0 before the first Monday (strftime %W)."""
    idx = pd.DatetimeIndex(ts)
    return ((idx.dayofyear - 1) + 7 - idx.dayofweek) // 7


def calendar_features(timestamps, dst_flags):
    idx = pd.DatetimeIndex(np.asarray(timestamps).astype("datetime64[ns]"))
    return {
        "day_of_week": np.asarray(idx.dayofweek, dtype=np.int64),
        "quarter": np.asarray(idx.quarter, dtype=np.int64),
        "month": np.asarray(idx.month, dtype=np.int64),
        "day_of_year": np.asarray(idx.dayofyear, dtype=np.int64),
        "day_of_month": np.asarray(idx.day, dtype=np.int64),
        "week_of_year": np.asarray(week_of_year(idx), dtype=np.int64),
        "hour_of_day": np.asarray(idx.hour, dtype=np.int64),
        "year": np.asarray(idx.year, dtype=np.int64),
        "dst_flag": np.asarray(dst_flags, dtype=np.int64),
    }


class TimeTable:
    """Merged weather and consumption rows with calendar features."""

    def __init__(self, frame):
        self.frame = frame.reset_index(drop=True)

    def __len__(self):
        return len(self.frame)

    @property
    def timestamps(self):
        return self.frame["timestamp"].to_numpy().astype("datetime64[m]")

    def column(self, name):
        return self.frame[name].to_numpy()

    def slice(self, start, stop):
        return TimeTable(self.frame.iloc[start:stop].copy())

    @classmethod
    def build(cls, timestamps, dst_flags, temperature, consumption):
        cols = {"timestamp": np.asarray(timestamps).astype("datetime64[ns]"),
                "dst_flag": np.asarray(dst_flags, dtype=np.int64),
                "temperature": np.asarray(temperature, dtype=np.float64),
                "consumption": np.asarray(consumption, dtype=np.float64)}
        feats = calendar_features(timestamps, dst_flags)
        for name in CALENDAR_FEATURES[:-1]:
            cols[name] = feats[name]
        return cls(pd.DataFrame(cols, columns=list(TABLE_COLUMNS)))

    def validate(self):
        f = self.frame
        if tuple(f.columns) != TABLE_COLUMNS:
            raise DataError(f"unexpected columns {list(f.columns)}")
        for name, (lo, hi) in FEATURE_RANGES.items():
            col = f[name].to_numpy()
            if col.size and (col.min() < lo or col.max() > hi):
                raise DataError(f"feature {name} outside [{lo}, {hi}]")
        keys = f[["timestamp", "dst_flag"]]
        if keys.duplicated().any():
            raise DataError("duplicate (timestamp, dst_flag) keys")
        return self


def merge(household, weather, rule=DEFAULT_DST, min_coverage=0.9):
    """Inner-join consumption and temperature on ``(timestamp, dst_flag)``."""
    h_flags = dst_annotate(household.timestamps, rule)
    w_flags = dst_annotate(weather.timestamps, rule)
    h = pd.DataFrame({"timestamp": household.timestamps, "dst_flag": h_flags,
                      "consumption": household.consumption})
    w = pd.DataFrame({"timestamp": weather.timestamps, "dst_flag": w_flags,
                      "temperature": weather.temperature})
    for name, df in (("household", h), ("weather", w)):
        if df.duplicated(["timestamp", "dst_flag"]).any():
            raise DataError(f"duplicate join keys in {name} data", stage="merge")
    joined = h.merge(w, on=["timestamp", "dst_flag"], how="inner", sort=False)
    joined = joined.sort_values(["timestamp", "dst_flag"], kind="stable")
    # the repeated fall-back hour sorts as (01:00,0), (01:00,1) which is chronological
    if len(h) and len(joined) < min_coverage * len(h):
        warnings.warn(f"merge kept {len(joined)} of {len(h)} household rows", DataWarning, stacklevel=2)
    table = TimeTable.build(joined["timestamp"].to_numpy(), joined["dst_flag"].to_numpy(),
                            joined["temperature"].to_numpy(), joined["consumption"].to_numpy())
    return table.validate()


def lockdown_filter(table, cutoff):
    """Keep rows strictly before midnight starting ``cutoff``."""
    if isinstance(cutoff, str):
        cutoff = dt.date.fromisoformat(cutoff)
    bound = np.datetime64(dt.datetime.combine(cutoff, dt.time()), "m")
    keep = table.timestamps < bound
    return TimeTable(table.frame.loc[keep].copy())


def split_sizes(n, fractions=(0.8, 0.1, 0.1)):
    """Validation and test sizes are floored; training takes the remainder."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions {fractions} do not sum to 1")
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    return n - n_val - n_test, n_val, n_test


MIN_SPLIT_ROWS = 10


def split(table, fractions=(0.8, 0.1, 0.1)):
    n = len(table)
    if n < MIN_SPLIT_ROWS:
        raise EmptyDatasetError(f"need at least {MIN_SPLIT_ROWS} rows to split, got {n}")
    n_train, n_val, _ = split_sizes(n, fractions)
    return (table.slice(0, n_train), table.slice(n_train, n_train + n_val),
            table.slice(n_train + n_val, n))


# --- scaling ----------------------------------------------------------------

@dataclass
class NormStats:
    features: tuple
    mean: np.ndarray
    std: np.ndarray
    dropped: tuple = ()
    target: str = "consumption"

    @property
    def target_index(self):
        return self.features.index(self.target)

    @property
    def target_mean(self):
        return float(self.mean[self.target_index])

    @property
    def target_std(self):
        return float(self.std[self.target_index])

    @property
    def identifier(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def transform(self, table):
        raw = np.column_stack([table.column(f).astype(np.float64) for f in self.features])
        return (raw - self.mean) / self.std

    def inverse_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_std + self.target_mean

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"features": list(self.features), "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std], "dropped": list(self.dropped),
                "target": self.target}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["features"]), np.array(d["mean"], dtype=np.float64),
                   np.array(d["std"], dtype=np.float64), tuple(d["dropped"]), d.get("target", "consumption"))


def fit_norm_stats(train, features=MODEL_FEATURES, unscaled=UNSCALED_FEATURES):
    """Population mean/std per feature from training rows only."""
    kept, means, stds, dropped = [], [], [], []
    for name in features:
        col = train.column(name).astype(np.float64)
        if name in unscaled:
            kept.append(name)
            means.append(0.0)
            stds.append(1.0)
            continue
        mu = float(np.mean(col))
        sigma = float(np.std(col))
        if not sigma > 1e-12 * max(1.0, abs(mu)):
            if name == "consumption":
                raise DataError("consumption is constant on the training split")
            dropped.append(name)
            warnings.warn(f"dropping constant feature {name!r}", DataWarning, stacklevel=2)
            continue
        kept.append(name)
        means.append(mu)
        stds.append(sigma)
    return NormStats(tuple(kept), np.array(means), np.array(stds), tuple(dropped))


@dataclass
class NormalizedSplit:
    timestamps: np.ndarray
    dst_flags: np.ndarray
    values: np.ndarray  # (n, f) scaled features
    target_kwh: np.ndarray
    stats: NormStats

    def __len__(self):
        return self.values.shape[0]

    @property
    def target(self):
        return self.values[:, self.stats.target_index]


def normalize(table, stats=None):
    """Scale ``table`` with ``stats``; fit them on ``table`` when not given."""
    if stats is None:
        stats = fit_norm_stats(table)
    split_ = NormalizedSplit(table.timestamps, table.column("dst_flag"), stats.transform(table),
                             table.column("consumption").astype(np.float64), stats)
    return split_, stats


# --- windows ----------------------------------------------------------------

@dataclass
class WindowedDataset:
    inputs: np.ndarray  # (n, w, f)
    targets: np.ndarray  # (n,) scaled consumption
    target_index: np.ndarray  # row index of each target within its split
    w: int
    s: int
    stats: NormStats = None
    timestamps: np.ndarray = None  # target timestamps
    target_kwh: np.ndarray = None
    input_end_times: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def f(self):
        return self.inputs.shape[2]


def window_count(T, w, s=1):
    return (T - w - 1) // s + 1 if T > w else 0


def window(split_, w, s=1, allow_any_w=False):
    """Slide a ``w``-row input window by ``s`` rows; target is the next row."""
    if not allow_any_w and w not in WINDOW_CHOICES:
        raise DataError(f"window size {w} not in {WINDOW_CHOICES}; pass allow_any_w to override")
    if s < 1:
        raise DataError("slide step must be >= 1")
    values = split_.values
    T = values.shape[0]
    if T <= w:
        raise EmptyDatasetError(f"{T} rows cannot fill a window of {w}")
    n = window_count(T, w, s)
    starts = np.arange(n) * s
    view = np.lib.stride_tricks.sliding_window_view(values, (w, values.shape[1]))[:, 0]
    inputs = np.ascontiguousarray(view[starts])
    tgt = starts + w
    return WindowedDataset(
        inputs, split_.target[tgt].copy(), tgt, w, s, split_.stats,
        split_.timestamps[tgt], split_.target_kwh[tgt], split_.timestamps[tgt - 1],
    )


# --- prepared dataset file -------------------------------------------------

PREPARED_SCHEMA = 1


@dataclass
class PreparedDataset:
    table: TimeTable
    bounds: tuple  # (n_train, n_val, n_test)
    stats: NormStats
    meta: dict = field(default_factory=dict)

    def split_tables(self):
        a, b, _ = self.bounds
        n = len(self.table)
        return self.table.slice(0, a), self.table.slice(a, a + b), self.table.slice(a + b, n)

    def normalized(self):
        return tuple(normalize(t, self.stats)[0] for t in self.split_tables())

    def windows(self, w, s=1, allow_any_w=False):
        return tuple(window(sp, w, s, allow_any_w) for sp in self.normalized())

    def save(self, path):
        f = self.table.frame
        arrays = {name: f[name].to_numpy() for name in TABLE_COLUMNS if name != "timestamp"}
        arrays["timestamp"] = self.table.timestamps.astype(np.int64)
        header = {"schema": PREPARED_SCHEMA, "bounds": list(self.bounds),
                  "norm_stats": self.stats.to_dict(), "meta": self.meta}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            if header.get("schema") != PREPARED_SCHEMA:
                raise DataError(f"{path}: prepared-dataset schema {header.get('schema')!r} unsupported")
            cols = {name: data[name] for name in TABLE_COLUMNS if name != "timestamp"}
            cols["timestamp"] = data["timestamp"].astype("datetime64[m]").astype("datetime64[ns]")
        frame = pd.DataFrame({name: cols[name] for name in TABLE_COLUMNS})
        return cls(TimeTable(frame), tuple(header["bounds"]), NormStats.from_dict(header["norm_stats"]),
                   header.get("meta", {}))


def prepare(household, stations, rule=DEFAULT_DST, lockdown_cutoff=None, fractions=(0.8, 0.1, 0.1)):
    """Run the whole preparation chain and return a :class:`PreparedDataset`."""
    stage = "fill"
    try:
        filled = [fill_missing_temperature(s) for s in stations]
        stage = "average"
        weather = average_stations(filled)
        stage = "merge"
        table = merge(household, weather, rule)
        if lockdown_cutoff is not None:
            stage = "lockdown_filter"
            table = lockdown_filter(table, lockdown_cutoff)
        stage = "split"
        train, val, test = split(table, fractions)
        stage = "normalize"
        stats = fit_norm_stats(train)
    except DataError as exc:
        if exc.stage is None:
            # keep the exception type, prefix the stage name
            exc.stage = stage
            exc.args = (f"[{stage}] {exc}",) + exc.args[1:]
        raise
    return PreparedDataset(table, (len(train), len(val), len(test)), stats)
