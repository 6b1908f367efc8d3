"""Deterministic synthetic household with home EV charging plus two weather stations.

Everything is driven from one seed through independent child streams, so
changing e.g. the EV rate does not perturb the temperature series.
"""
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .data import DEFAULT_DST, HOUR, DstRule, HouseholdSeries, WeatherSeries

# evening-heavy plug-in profile, hours 0..23
DEFAULT_PLUG_IN = (
    1, 0.5, 0.2, 0.1, 0.1, 0.2, 0.5, 1, 1, 1, 1, 1,
    1.5, 1.5, 1.5, 2, 4, 7, 9, 8, 6, 4, 3, 2,
)
NOISE_CLIP = 3.5  # noise is truncated at this many standard deviations
HVAC_BALANCE_C = 18.0


@dataclass
class SynthConfig:
    seed: int = 42
    start: dt.datetime = dt.datetime(2018, 7, 22, 0, 0)
    end: dt.datetime = dt.datetime(2020, 7, 21, 0, 0)
    base_load_kw: float = 1.2
    hvac_gain_kw_per_degC: float = 0.06
    ev_charger_kw: float = 7.2
    ev_sessions_per_week: float = 4.0
    ev_plug_in_hour_distribution: tuple = DEFAULT_PLUG_IN
    noise_std_kw: float = 0.15
    missing_temp_rate: float = 0.01
    n_stations: int = 2
    level_shift_kw: float = 0.0
    level_shift_start: dt.datetime = None
    household_id: str = "EV-synth"
    dst_rule: DstRule = field(default_factory=lambda: DEFAULT_DST)

    def validate(self):
        from .errors import ConfigError
        for name in ("base_load_kw", "hvac_gain_kw_per_degC", "ev_charger_kw",
                     "ev_sessions_per_week", "noise_std_kw", "missing_temp_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.missing_temp_rate < 1:
            raise ConfigError("missing_temp_rate must be < 1")
        if self.end <= self.start:
            raise ConfigError("end must be after start")
        if len(self.ev_plug_in_hour_distribution) != 24 or min(self.ev_plug_in_hour_distribution) < 0:
            raise ConfigError("ev_plug_in_hour_distribution needs 24 non-negative weights")
        if self.n_stations < 1:
            raise ConfigError("n_stations must be >= 1")
        return self


def _is_dst_standard(std_times, rule):
    """DST status for instants expressed in local standard time."""
    years = std_times.astype("datetime64[Y]").astype(int) + 1970
    out = np.zeros(std_times.shape, dtype=bool)
    for y in np.unique(years):
        start_wall, repeat_wall = rule.transitions(int(y))
        # DST begins at the start wall time (standard) and ends when standard
        # time reaches the repeated hour.
        sel = years == y
        t = std_times[sel]
        out[sel] = (t >= start_wall) & (t < repeat_wall)
    return out


def local_hours(start, end, rule=DEFAULT_DST):
    """Hourly wall-clock timestamps between two wall times, inclusive.

    Returns ``(wall, standard)``; wall time repeats the fall-back hour and
    skips the spring-forward hour.
    """
    s = np.datetime64(start, "m")
    e = np.datetime64(end, "m")
    s_std = s - (HOUR if _is_dst_standard(np.array([s - HOUR]), rule)[0] else np.timedelta64(0, "m"))
    e_std = e - (HOUR if _is_dst_standard(np.array([e - HOUR]), rule)[0] else np.timedelta64(0, "m"))
    n = int((e_std - s_std) // HOUR) + 1
    std = s_std + np.arange(n) * HOUR
    wall = std + np.where(_is_dst_standard(std, rule), HOUR, np.timedelta64(0, "m"))
    return wall, std


def generate_components(cfg):
    """All generated series plus the latent pieces used to build them."""
    cfg.validate()
    seqs = np.random.SeedSequence(cfg.seed).spawn(6)
    r_weather, r_station, r_missing, r_ev, r_noise, _ = (np.random.default_rng(s) for s in seqs)
    wall, std = local_hours(cfg.start, cfg.end, cfg.dst_rule)
    n = wall.size
    days = std.astype("datetime64[D]")
    doy = (days - days.astype("datetime64[Y]")).astype(int) + 1
    hour_std = (std - days).astype("timedelta64[h]").astype(int)
    wall_days = wall.astype("datetime64[D]")
    hour = (wall - wall_days).astype("timedelta64[h]").astype(int)
    weekday = (wall_days.astype(int) + 3) % 7  # 1970-01-01 was a Thursday

    # temperature: seasonal + diurnal + slow AR(1) weather
    ar = np.empty(n)
    eps = r_weather.normal(0.0, 0.6, n)
    acc = 0.0
    for k in range(n):
        acc = 0.97 * acc + eps[k]
        ar[k] = acc
    true_temp = (8.0 + 13.0 * np.cos(2 * np.pi * (doy - 200) / 365.25)
                 + 4.0 * np.cos(2 * np.pi * (hour_std - 15) / 24.0) + ar)
    stations = []
    for k in range(cfg.n_stations):
        offset = r_station.normal(0.0, 0.5)
        reading = np.round(true_temp + offset + r_station.normal(0.0, 0.4, n), 1)
        reading[r_missing.random(n) < cfg.missing_temp_rate] = np.nan
        stations.append(WeatherSeries(f"station-{k + 1}", wall.copy(), reading))

    daily = np.cos(2 * np.pi * (hour - 19) / 24.0)
    weekly = np.where(weekday >= 5, 1.0, -0.2)
    base = cfg.base_load_kw * (0.75 + 0.15 * daily + 0.10 * weekly)
    hvac = cfg.hvac_gain_kw_per_degC * np.abs(true_temp - HVAC_BALANCE_C)

    # EV sessions: Poisson count per day, start hour from the plug-in profile
    ev_active = np.zeros(n, dtype=bool)
    probs = np.asarray(cfg.ev_plug_in_hour_distribution, dtype=np.float64)
    probs = probs / probs.sum()
    rate = cfg.ev_sessions_per_week / 7.0
    first_day = days[0]
    n_days = int((days[-1] - first_day).astype(int)) + 1
    counts = r_ev.poisson(rate, n_days) if rate > 0 else np.zeros(n_days, dtype=int)
    for d in range(n_days):
        for _ in range(counts[d]):
            h0 = r_ev.choice(24, p=probs)
            dur = r_ev.integers(2, 6)
            start = (first_day + np.timedelta64(d, "D")).astype("datetime64[m]") + h0 * HOUR
            i0 = int((start - std[0]) // HOUR)
            lo, hi = max(i0, 0), min(i0 + dur, n)
            if lo < hi:
                ev_active[lo:hi] = True
    ev = np.where(ev_active, cfg.ev_charger_kw, 0.0)

    noise = np.clip(r_noise.standard_normal(n), -NOISE_CLIP, NOISE_CLIP) * cfg.noise_std_kw
    shift = np.zeros(n)
    if cfg.level_shift_start is not None and cfg.level_shift_kw:
        shift[wall >= np.datetime64(cfg.level_shift_start, "m")] = cfg.level_shift_kw
    consumption = np.maximum(base + hvac + ev + noise + shift, 0.0)
    household = HouseholdSeries(cfg.household_id, wall.copy(), np.round(consumption, 4))
    return {
        "household": household, "weather": stations, "true_temperature": true_temp,
        "base": base, "hvac": hvac, "ev_active": ev_active, "standard_time": std,
    }


def generate(cfg):
    """Return ``(household, [weather stations])`` for ``cfg``."""
    parts = generate_components(cfg)
    return parts["household"], parts["weather"]
