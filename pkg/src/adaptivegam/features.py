"""Covariate engineering for per-instant load models.

Derives, from a raw (load, temperature) table, every input the additive model
needs: local-calendar variables (day type, summer-hour flag, time of year),
exponentially smoothed temperatures, smoothed daily temperature extremes,
lagged loads and the instant-of-day index.

Calendar quantities are computed in the configured IANA timezone; the table's
grid itself stays in UTC. The instant index is derived from the local wall
clock, so the two daylight-saving transition days of a year carry one
duplicated / one missing instant, exactly as the wall clock does.
"""

import numpy as np
import pandas as pd

from .errors import FactorOutOfRange, InterpolationGapTooLong, MissingColumn
from .timetable import TimeTable

TREND_EPOCH = pd.Timestamp("2000-01-01", tz="UTC")

# Feature column order is part of the CSV interface; keep it stable.
FEATURE_COLUMNS = [
    "load_mw", "temp_c", "day_type", "dls", "toy", "trend",
    "temp95", "temp99", "tempmin99", "tempmax99",
    "load1d", "load1w", "instant", "lag_ok",
]

SATURDAY = 6  # day_type coding: 1=Monday .. 7=Sunday


def exp_smooth(x, factor, init=None):
    """Exponential smoothing s_t = factor*s_{t-1} + (1-factor)*x_t, s_1 = x_1.

    `init` carries the last smoothed value of a previous chunk so streaming
    calls compose: smoothing a series in one call or in two chained calls
    gives identical output.
    """
    if not 0.0 <= factor < 1.0:
        raise FactorOutOfRange(f"smoothing factor must be in [0, 1), got {factor}")
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("exp_smooth needs a nonempty input")
    out = np.empty_like(x)
    prev = x[0] if init is None else factor * init + (1.0 - factor) * x[0]
    out[0] = prev
    for t in range(1, x.size):
        prev = factor * prev + (1.0 - factor) * x[t]
        out[t] = prev
    return out


def calendar_features(index, tz, period_minutes):
    """day_type (1=Mon..7=Sun), dls (summer-hour flag) and toy for a UTC index.

    toy grows linearly through each local calendar year, 0 at Jan 1 00:00 and
    1 at the year's final instant of the declared period (23:30 for a
    half-hourly grid, 23:00 hourly), leap-aware by construction.
    """
    local = index.tz_convert(tz)
    day_type = (local.dayofweek + 1).to_numpy()
    dls = np.array([1 if ts.dst() else 0 for ts in local], dtype=int)

    toy = np.empty(len(index), dtype=float)
    years = local.year.to_numpy()
    step = pd.Timedelta(minutes=period_minutes)
    for year in np.unique(years):
        start = pd.Timestamp(int(year), 1, 1).tz_localize(tz)
        end = pd.Timestamp(int(year) + 1, 1, 1).tz_localize(tz) - step
        mask = years == year
        span = (end - start).value
        toy[mask] = (index[mask].tz_convert(tz).asi8 - start.value) / span
    instant = ((local.hour * 60 + local.minute) // period_minutes).to_numpy()
    return day_type, dls, toy, instant


def interpolate_short_gaps(values, max_run=3, name="temp_c"):
    """Linearly fill NaN runs of at most `max_run` interior values."""
    s = pd.Series(np.asarray(values, dtype=float))
    if not s.isna().any():
        return s.to_numpy()
    runs = s.isna().astype(int).groupby(s.notna().cumsum()).sum()
    worst = int(runs.max())
    if worst > max_run:
        raise InterpolationGapTooLong(
            f"{name} has a run of {worst} consecutive missing values (limit {max_run})")
    if np.isnan(s.iloc[0]) or np.isnan(s.iloc[-1]):
        raise InterpolationGapTooLong(f"{name} starts or ends with missing values")
    return s.interpolate(method="linear").to_numpy()


def smoothed_temperatures(index, temp, tz):
    """temp95/temp99 over instants and tempmin99/tempmax99 over local days."""
    temp95 = exp_smooth(temp, 0.95)
    temp99 = exp_smooth(temp, 0.99)

    local_date = index.tz_convert(tz).date
    by_day = pd.DataFrame({"temp": temp, "date": local_date}).groupby("date")["temp"]
    daily_min = by_day.min()
    daily_max = by_day.max()
    smin = exp_smooth(daily_min.to_numpy(), 0.99)
    smax = exp_smooth(daily_max.to_numpy(), 0.99)
    min_map = dict(zip(daily_min.index, smin))
    max_map = dict(zip(daily_max.index, smax))
    tempmin99 = np.array([min_map[d] for d in local_date])
    tempmax99 = np.array([max_map[d] for d in local_date])
    return temp95, temp99, tempmin99, tempmax99


def lag_features(load, instant_count):
    """Same-instant loads one day and one week back, plus a usability flag."""
    load = np.asarray(load, dtype=float)
    load1d = np.full_like(load, np.nan)
    load1w = np.full_like(load, np.nan)
    day = instant_count
    week = 7 * instant_count
    if load.size > day:
        load1d[day:] = load[:-day]
    if load.size > week:
        load1w[week:] = load[:-week]
    lag_ok = np.isfinite(load1d) & np.isfinite(load1w)
    return load1d, load1w, lag_ok


def build_features(raw, tz):
    """Derive the full covariate table from a raw (load_mw, temp_c) TimeTable."""
    for col in ("load_mw", "temp_c"):
        if col not in raw.columns:
            raise MissingColumn(f"build_features needs column {col!r}")
    index = raw.index
    load = raw.column("load_mw")
    temp = interpolate_short_gaps(raw.frame["temp_c"].to_numpy(dtype=float))

    day_type, dls, toy, instant = calendar_features(index, tz, raw.period_minutes)
    temp95, temp99, tempmin99, tempmax99 = smoothed_temperatures(index, temp, tz)
    load1d, load1w, lag_ok = lag_features(load, raw.instant_count)
    trend = (index.asi8 - TREND_EPOCH.value) / (365.25 * 24 * 3600 * 1_000_000_000)

    frame = pd.DataFrame(
        {
            "load_mw": load,
            "temp_c": temp,
            "day_type": day_type,
            "dls": dls,
            "toy": toy,
            "trend": trend,
            "temp95": temp95,
            "temp99": temp99,
            "tempmin99": tempmin99,
            "tempmax99": tempmax99,
            "load1d": load1d,
            "load1w": load1w,
            "instant": instant,
            "lag_ok": lag_ok.astype(int),
        },
        index=index,
    )
    return TimeTable(frame[FEATURE_COLUMNS], raw.period_minutes, validate=False)


def split_by_instant(table):
    """Partition a feature table into one per-instant frame (ordered by instant).

    The returned frames keep the timestamp index; they are daily series, so
    they are plain DataFrames rather than fixed-period TimeTables.
    """
    if "instant" not in table.columns:
        raise MissingColumn("split_by_instant needs the 'instant' column")
    frame = table.frame
    return [frame[frame["instant"] == i] for i in sorted(frame["instant"].unique())]
