"""Synthetic twin-series generator for desk-scale verification.

Loads come from a known multiplicative structure: base level x weekly profile
x intraday profile x annual cycle x heating response to a seasonal AR
temperature x slow daily persistence x i.i.d. noise. A regime break at a
configurable day drops the level and progressively flattens the weekly
profile toward its Saturday value (renormalized so weekly means stay
comparable). The target series is a rho-scaled twin of the source sharing the
weather, with independent idiosyncratic noise and its break shifted later by
a configurable offset.
"""

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import InvalidScenario
from .timetable import TimeTable

_WEEK_PROFILE = np.array([1.05, 1.06, 1.06, 1.05, 1.02, 0.92, 0.88])
_SATURDAY_POS = 5  # 0-based day-of-week index of Saturday


@dataclass(frozen=True)
class Scenario:
    start: str = "2018-01-01"
    pre_break_days: int = 730
    post_break_days: int = 60
    period_minutes: int = 60
    tz: str = "Europe/Paris"
    base_level: float = 10000.0
    rho: float = 1.0
    break_depth: float = 0.15
    break_offset_days: int = 7
    profile_flatten: float = 1.0
    flatten_ramp_days: int = 35
    noise_sd: float = 0.015
    daily_ar: float = 0.8
    daily_sd: float = 0.012
    # shared log-level random walk (macro conditions common to the twins)
    level_walk_sd: float = 0.0
    temp_base: float = 12.0
    temp_seasonal: float = 8.0
    temp_noise_sd: float = 2.5
    temp_ar: float = 0.95
    heating_threshold: float = 15.0
    heating_gain: float = 0.012
    annual_amplitude: float = 0.04
    # slow deterministic drift of effect strengths (shared across the twins),
    # so a trained model's multiplicative corrections genuinely move over time
    weekly_drift_amp: float = 0.45
    weekly_drift_period_days: float = 160.0
    heating_drift_amp: float = 0.0
    heating_drift_period_days: float = 380.0
    level_drift_amp: float = 0.008
    level_drift_period_days: float = 350.0

    def validated(self):
        if self.pre_break_days <= 0 or self.post_break_days < 0:
            raise InvalidScenario("day counts must be positive")
        if self.period_minutes not in (30, 60):
            raise InvalidScenario("period must be 30 or 60 minutes")
        if not 0.0 <= self.break_depth < 1.0:
            raise InvalidScenario("break depth must be in [0, 1)")
        if self.rho <= 0.0:
            raise InvalidScenario("rho must be positive")
        if self.break_offset_days < 0:
            raise InvalidScenario("break offset must be >= 0")
        if not 0.0 <= self.profile_flatten <= 1.0:
            raise InvalidScenario("profile_flatten must be in [0, 1]")
        return self

    @property
    def total_days(self):
        return self.pre_break_days + self.break_offset_days + self.post_break_days

    def source_break_day(self):
        return self.pre_break_days

    def target_break_day(self):
        return self.pre_break_days + self.break_offset_days

    def break_timestamps(self):
        """(source, target) break instants, at local midnight of the break day."""
        start = pd.Timestamp(self.start).tz_localize(self.tz)
        src = start + pd.Timedelta(days=self.source_break_day())
        tgt = start + pd.Timedelta(days=self.target_break_day())
        return src.tz_convert("UTC"), tgt.tz_convert("UTC")


def _grid(scenario):
    start = pd.Timestamp(scenario.start).tz_localize(scenario.tz).tz_convert("UTC")
    per_day = (24 * 60) // scenario.period_minutes
    n = scenario.total_days * per_day
    return pd.date_range(start, periods=n, freq=f"{scenario.period_minutes}min")


def _temperature(scenario, index, rng):
    local = index.tz_convert(scenario.tz)
    doy = local.dayofyear.to_numpy()
    hour = local.hour.to_numpy() + local.minute.to_numpy() / 60.0
    season = -np.cos(2.0 * np.pi * (doy - 15) / 365.25)
    intraday = -np.cos(2.0 * np.pi * (hour - 15) / 24.0)
    noise = np.empty(len(index))
    prev = 0.0
    innov_sd = scenario.temp_noise_sd * np.sqrt(1.0 - scenario.temp_ar**2)
    eps = rng.normal(0.0, innov_sd, len(index))
    for t in range(len(index)):
        prev = scenario.temp_ar * prev + eps[t]
        noise[t] = prev
    return scenario.temp_base + scenario.temp_seasonal * season + 2.0 * intraday + noise


def _intraday_profile(period_minutes):
    per_day = (24 * 60) // period_minutes
    h = np.arange(per_day) * period_minutes / 60.0
    shape = (0.10 * np.exp(-0.5 * ((h - 19.0) / 3.0) ** 2)
             + 0.06 * np.exp(-0.5 * ((h - 9.0) / 2.5) ** 2)
             - 0.08 * np.exp(-0.5 * ((h - 3.5) / 2.5) ** 2))
    profile = 1.0 + shape
    return profile / profile.mean()


def _weekly_factor(dow, days_since_break, amp_scale, scenario):
    """Weekly profile value: drifted amplitude, flattened toward Saturday
    after the break. The profile keeps weekly mean one throughout."""
    base = _WEEK_PROFILE / _WEEK_PROFILE.mean()
    profile = 1.0 + amp_scale * (base - 1.0)
    if days_since_break < 0 or scenario.profile_flatten == 0.0:
        return profile[dow]
    ramp = min(1.0, (days_since_break + 1) / max(1, scenario.flatten_ramp_days))
    phi = scenario.profile_flatten * ramp
    flattened = (1.0 - phi) * profile + phi * profile[_SATURDAY_POS]
    flattened = flattened / flattened.mean()
    return flattened[dow]


def _series(scenario, index, temp, break_day, level, rng, level_walk):
    local = index.tz_convert(scenario.tz)
    dow = local.dayofweek.to_numpy()
    date_codes = pd.factorize(local.date)[0]
    n_days = date_codes.max() + 1
    hour_pos = ((local.hour.to_numpy() * 60 + local.minute.to_numpy())
                // scenario.period_minutes)
    profile = _intraday_profile(scenario.period_minutes)

    daily = np.empty(n_days)
    prev = 0.0
    innov_sd = scenario.daily_sd * np.sqrt(1.0 - scenario.daily_ar**2)
    eps = rng.normal(0.0, innov_sd, n_days)
    for d in range(n_days):
        prev = scenario.daily_ar * prev + eps[d]
        daily[d] = prev

    doy_frac = (local.dayofyear.to_numpy() - 1) / 365.25
    annual = 1.0 + scenario.annual_amplitude * np.cos(2.0 * np.pi * doy_frac)
    heat_drift = 1.0 + scenario.heating_drift_amp * np.sin(
        2.0 * np.pi * date_codes / scenario.heating_drift_period_days + 1.0)
    heating = 1.0 + (scenario.heating_gain * heat_drift
                     * np.maximum(0.0, scenario.heating_threshold - temp))
    weekly_amp = 1.0 + scenario.weekly_drift_amp * np.sin(
        2.0 * np.pi * date_codes / scenario.weekly_drift_period_days)
    level_drift = 1.0 + scenario.level_drift_amp * np.sin(
        2.0 * np.pi * date_codes / scenario.level_drift_period_days + 0.5)

    weekly = np.empty(len(index))
    level_mult = np.ones(len(index))
    for t in range(len(index)):
        since = date_codes[t] - break_day
        weekly[t] = _weekly_factor(dow[t], since, weekly_amp[t], scenario)
        if since >= 0:
            level_mult[t] = 1.0 - scenario.break_depth

    noise = 1.0 + scenario.noise_sd * rng.normal(0.0, 1.0, len(index))
    y = (level * weekly * profile[hour_pos] * annual * heating * level_drift
         * np.exp(daily[date_codes] + level_walk[date_codes]) * level_mult * noise)
    return y


def gen_synthetic(scenario, seed=0):
    """Generate the (source, target) TimeTable pair for a scenario."""
    scenario = scenario.validated()
    idx = _grid(scenario)
    seq = np.random.SeedSequence(seed)
    rng_weather, rng_source, rng_target = (np.random.default_rng(s) for s in seq.spawn(3))

    temp = _temperature(scenario, idx, rng_weather)
    # local-date count can exceed total_days by one when the span crosses an
    # odd number of daylight-saving shifts
    n_local_days = int(pd.factorize(idx.tz_convert(scenario.tz).date)[0].max()) + 1
    level_walk = np.cumsum(rng_weather.normal(0.0, scenario.level_walk_sd, n_local_days))
    y_src = _series(scenario, idx, temp, scenario.source_break_day(),
                    scenario.base_level, rng_source, level_walk)
    y_tgt = _series(scenario, idx, temp, scenario.target_break_day(),
                    scenario.base_level * scenario.rho, rng_target, level_walk)

    source = TimeTable(pd.DataFrame({"load_mw": y_src, "temp_c": temp}, index=idx),
                       scenario.period_minutes)
    target = TimeTable(pd.DataFrame({"load_mw": y_tgt, "temp_c": temp}, index=idx),
                       scenario.period_minutes)
    return source, target


def counterfactual(scenario, seed=0):
    """Same draw with the break switched off (for generator ground-truth tests)."""
    quiet = replace(scenario, break_depth=0.0, profile_flatten=0.0)
    return gen_synthetic(quiet, seed=seed)
