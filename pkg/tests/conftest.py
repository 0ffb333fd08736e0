import numpy as np
import pandas as pd
import pytest

from adaptivegam.features import exp_smooth
from adaptivegam.gam import (
    GamSpec,
    InteractionTerm,
    LinearByTerm,
    LinearTerm,
    SmoothTerm,
    SplineGamRegressor,
)
from adaptivegam.timetable import TimeTable


def make_daily_frame(n_days=400, seed=0, level=1000.0, start="2018-01-01"):
    """One-instant daily feature frame with believable covariate structure."""
    rng = np.random.default_rng(seed)
    idx = pd.date_range(start, periods=n_days, freq="D", tz="UTC")
    day_type = ((np.arange(n_days) % 7) + 1).astype(float)
    dls = ((np.arange(n_days) % 365 > 85) & (np.arange(n_days) % 365 < 300)).astype(float)
    toy = (np.arange(n_days) % 365) / 365.0
    temp = 12 - 8 * np.cos(2 * np.pi * toy) + rng.normal(0, 2, n_days)
    temp95 = exp_smooth(temp, 0.95)
    temp99 = exp_smooth(temp, 0.99)
    tempmin = exp_smooth(temp - 3 + rng.normal(0, 1, n_days), 0.99)
    tempmax = exp_smooth(temp + 3 + rng.normal(0, 1, n_days), 0.99)
    weekly = np.where(day_type >= 6, -40.0, 12.0)
    load = (level + 60 * np.sin(2 * np.pi * toy) - 15 * (temp - 15) + weekly
            + rng.normal(0, 10, n_days))
    load1d = np.roll(load, 1)
    load1w = np.roll(load, 7)
    frame = pd.DataFrame(
        {"load_mw": load, "temp_c": temp, "day_type": day_type, "dls": dls,
         "toy": toy, "trend": np.arange(n_days) / 365.25, "temp95": temp95,
         "temp99": temp99, "tempmin99": tempmin, "tempmax99": tempmax,
         "load1d": load1d, "load1w": load1w,
         "instant": np.zeros(n_days), "lag_ok": np.ones(n_days)},
        index=idx,
    )
    frame.iloc[:7, frame.columns.get_loc("lag_ok")] = 0
    return frame


def small_spec():
    """Reduced identifiable spec for daily fixtures."""
    return GamSpec(terms=(
        InteractionTerm("daytype_dls", ("day_type", "dls")),
        LinearByTerm("load1d_by_daytype", "load1d", "day_type"),
        LinearTerm("load1w", "load1w"),
        SmoothTerm("toy", "toy", m=8),
        SmoothTerm("temp", "temp_c", m=8),
    ))


@pytest.fixture(scope="session")
def daily_frame():
    return make_daily_frame()


@pytest.fixture(scope="session")
def fitted_gam(daily_frame):
    df = daily_frame[daily_frame["lag_ok"] > 0]
    return SplineGamRegressor(spec=small_spec(), lam=1.0).fit(df)


@pytest.fixture(scope="session")
def raw_table():
    rng = np.random.default_rng(3)
    idx = pd.date_range("2019-01-01", periods=48 * 30, freq="30min", tz="UTC")
    return TimeTable(pd.DataFrame(
        {"load_mw": 900 + rng.normal(0, 25, len(idx)),
         "temp_c": 10 + rng.normal(0, 3, len(idx))}, index=idx), 30)
