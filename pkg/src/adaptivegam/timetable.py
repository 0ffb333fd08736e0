"""Regular-grid time table: the data carrier every other module consumes.

A TimeTable is a pandas DataFrame with a strictly increasing, gap-free,
UTC-aware DatetimeIndex at a fixed period of 30 or 60 minutes, and purely
numeric columns. Construction validates the grid once so downstream code can
shift rows to take lags without re-checking timestamps.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DuplicateTimestamp, GapInSeries, MalformedRow, MissingColumn

ALLOWED_PERIODS = (30, 60)

DEFAULT_SCHEMA = {"timestamp": "timestamp", "load_mw": "load_mw", "temp_c": "temp_c"}


@dataclass
class TimeTable:
    frame: pd.DataFrame
    period_minutes: int
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.period_minutes not in ALLOWED_PERIODS:
            raise ValueError(f"period must be one of {ALLOWED_PERIODS} minutes, got {self.period_minutes}")
        idx = self.frame.index
        if not isinstance(idx, pd.DatetimeIndex):
            raise TypeError("TimeTable frame must be indexed by timestamps")
        if idx.tz is None:
            self.frame = self.frame.set_axis(idx.tz_localize("UTC"))
        elif str(idx.tz) != "UTC":
            self.frame = self.frame.set_axis(idx.tz_convert("UTC"))
        if self.validate:
            _check_grid(self.frame.index, self.period_minutes)

    @property
    def instant_count(self):
        return (24 * 60) // self.period_minutes

    @property
    def index(self):
        return self.frame.index

    @property
    def columns(self):
        return list(self.frame.columns)

    def __len__(self):
        return len(self.frame)

    def column(self, name):
        if name not in self.frame.columns:
            raise MissingColumn(f"column {name!r} not present (have {list(self.frame.columns)})")
        return self.frame[name].to_numpy(dtype=float)

    def with_columns(self, columns):
        """Return a new TimeTable with extra/replaced columns (same grid)."""
        frame = self.frame.copy()
        for name, values in columns.items():
            frame[name] = values
        return TimeTable(frame, self.period_minutes, validate=False)

    def between(self, start=None, end=None):
        """Contiguous slice by timestamp (inclusive bounds); grid stays valid."""
        frame = self.frame
        if start is not None:
            frame = frame[frame.index >= as_utc_timestamp(start)]
        if end is not None:
            frame = frame[frame.index <= as_utc_timestamp(end)]
        return TimeTable(frame, self.period_minutes, validate=False)

    def to_csv(self, path):
        out = self.frame.copy()
        out.insert(0, "timestamp", out.index.strftime("%Y-%m-%dT%H:%M:%SZ"))
        out.to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path, period_minutes):
        """Read back a table written by to_csv (timestamp column + numerics)."""
        raw = pd.read_csv(path)
        if "timestamp" not in raw.columns:
            raise MissingColumn(f"{path} has no 'timestamp' column")
        idx = pd.to_datetime(raw.pop("timestamp"), utc=True, format="ISO8601")
        frame = raw.astype(float)
        frame.index = pd.DatetimeIndex(idx)
        return cls(frame, period_minutes)


def as_utc_timestamp(value):
    ts = pd.Timestamp(value)
    if ts.tz is None:
        return ts.tz_localize("UTC")
    return ts.tz_convert("UTC")


def _check_grid(index, period_minutes):
    if len(index) == 0:
        return
    if index.has_duplicates:
        dup = index[index.duplicated()][0]
        raise DuplicateTimestamp(f"duplicate timestamp {dup}")
    step = pd.Timedelta(minutes=period_minutes)
    deltas = np.diff(index.asi8)
    expected = step.value
    bad = np.nonzero(deltas != expected)[0]
    if bad.size:
        i = bad[0]
        if deltas[i] < 0:
            raise ValueError("timestamps must be strictly increasing")
        first_missing = index[i] + step
        raise GapInSeries(first_missing)


def parse_load_csv(path, schema=None, period_minutes=30, require_temp=True):
    """Read a load/weather CSV into a validated TimeTable.

    schema maps canonical names (timestamp, load_mw, temp_c) to the column
    names actually present in the file. Timestamps parse as ISO-8601 or epoch
    seconds; naive timestamps are taken as UTC. The load column must parse as
    a number on every row; temperature cells may be empty (handled later by
    the feature builder's short-gap interpolation).
    """
    schema = dict(DEFAULT_SCHEMA, **(schema or {}))
    raw = pd.read_csv(path, dtype=str, skipinitialspace=True)
    ts_col = schema["timestamp"]
    if ts_col not in raw.columns:
        raise MissingColumn(f"timestamp column {ts_col!r} not found in {path}")

    ts = _parse_timestamps(raw[ts_col])
    bad = np.nonzero(ts.isna().to_numpy())[0]
    if bad.size:
        raise MalformedRow(int(bad[0]) + 2, f"unparseable timestamp {raw[ts_col].iloc[bad[0]]!r}")

    data = {}
    for canonical in ("load_mw", "temp_c"):
        source = schema[canonical]
        if source not in raw.columns:
            if canonical == "temp_c" and not require_temp:
                continue
            raise MissingColumn(f"column {source!r} not found in {path}")
        cells = raw[source]
        values = pd.to_numeric(cells, errors="coerce")
        empty = cells.isna() | (cells.astype(str).str.strip() == "")
        garbage = values.isna() & ~empty
        if garbage.any():
            i = int(np.nonzero(garbage.to_numpy())[0][0])
            raise MalformedRow(i + 2, f"non-numeric {canonical} value {cells.iloc[i]!r}")
        if canonical == "load_mw" and empty.any():
            i = int(np.nonzero(empty.to_numpy())[0][0])
            raise MalformedRow(i + 2, "empty load value")
        data[canonical] = values.to_numpy(dtype=float)

    frame = pd.DataFrame(data, index=pd.DatetimeIndex(ts))
    frame = frame.sort_index()
    return TimeTable(frame, period_minutes)


def _parse_timestamps(cells):
    stripped = cells.astype(str).str.strip()
    numeric = pd.to_numeric(stripped, errors="coerce")
    if numeric.notna().all():
        return pd.to_datetime(numeric, unit="s", utc=True)
    ts = pd.to_datetime(stripped, errors="coerce", utc=True, format="ISO8601")
    return ts
