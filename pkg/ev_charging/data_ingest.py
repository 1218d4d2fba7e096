"""Minute-resolution trip logs, hourly price series and transition counts.

Trip log CSV:  ``timestamp,state`` with ISO-8601 minute timestamps and integer
state ids (1 = not driving, 2 = driving, or 1..N for hidden-state-resolved
traces). Price CSV: ``timestamp,price_eur_mwh`` with hourly timestamps.
"""

import io
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Literal, get_args

import numpy as np
import pandas as pd

from ev_charging.errors import DataError

logger = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440
TRACE_HEADER = ("timestamp", "state")
PRICE_HEADER = ("timestamp", "price_eur_mwh")
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"

DayFilter = Literal["weekday", "weekend", "all"]
"""Which calendar days contribute to transition counts

- `weekday`: Monday through Friday
- `weekend`: Saturday and Sunday
- `all`: every day
"""


@dataclass(frozen=True, eq=False)
class DrivingTrace:
    """Contiguous per-minute sequence of driving states.

    `states[i]` is the state during the minute starting at `start + i` minutes.
    """

    start: datetime
    states: np.ndarray
    n_symbols: int = 2

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.int64)
        if states.ndim != 1 or states.size == 0:
            raise DataError("empty trace")
        if self.n_symbols < 2:
            raise DataError(f"n_symbols must be at least 2, got {self.n_symbols}")
        if states.min() < 1 or states.max() > self.n_symbols:
            bad = states[(states < 1) | (states > self.n_symbols)][0]
            raise DataError(f"unknown state id {bad}")
        if self.start.second or self.start.microsecond:
            raise DataError(f"start {self.start} is not on a minute boundary")
        object.__setattr__(self, "states", states)

    @property
    def n_minutes(self) -> int:
        return int(self.states.size)

    @property
    def end(self) -> datetime:
        """Timestamp of the last minute in the trace."""
        return self.start + timedelta(minutes=self.n_minutes - 1)

    @property
    def start_minute(self) -> int:
        """Minute-of-day index (1..1440) of the first minute."""
        return self.start.hour * 60 + self.start.minute + 1

    @property
    def minute_of_day(self) -> np.ndarray:
        """Minute-of-day index s in 1..1440 for every minute; 00:00-00:01 is s=1."""
        return (self.start_minute - 1 + np.arange(self.n_minutes)) % MINUTES_PER_DAY + 1

    @property
    def day_labels(self) -> np.ndarray:
        """True for minutes falling on Monday through Friday."""
        day_offset = (self.start_minute - 1 + np.arange(self.n_minutes)) // MINUTES_PER_DAY
        return (self.start.weekday() + day_offset) % 7 < 5

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.n_minutes, freq="min")

    def slice(self, begin: int, stop: int | None = None) -> "DrivingTrace":
        """Sub-trace covering minutes `begin` (inclusive) to `stop` (exclusive)."""
        states = self.states[begin:stop]
        return DrivingTrace(self.start + timedelta(minutes=begin), states, self.n_symbols)

    def driving_mask(self) -> np.ndarray:
        return self.states >= 2


@dataclass(frozen=True, eq=False)
class PriceSeries:
    """Hourly spot prices in currency/MWh starting at an hour boundary."""

    start: datetime
    hourly_prices: np.ndarray

    def __post_init__(self) -> None:
        prices = np.asarray(self.hourly_prices, dtype=float)
        if prices.ndim != 1 or prices.size == 0:
            raise DataError("empty price series")
        if not np.all(np.isfinite(prices)):
            raise DataError("price series contains non-finite values")
        if self.start.minute or self.start.second or self.start.microsecond:
            raise DataError(f"price series start {self.start} is not on an hour boundary")
        object.__setattr__(self, "hourly_prices", prices)

    @property
    def n_hours(self) -> int:
        return int(self.hourly_prices.size)

    @property
    def start_minute(self) -> int:
        return self.start.hour * 60 + 1

    def to_minutes(self) -> np.ndarray:
        """Per-minute prices; each hourly value is repeated 60 times."""
        return np.repeat(self.hourly_prices, 60)

    def window(self, begin: datetime, minutes: int) -> np.ndarray:
        """Per-minute prices for `minutes` minutes starting at `begin`."""
        offset = int((begin - self.start) / timedelta(minutes=1))
        per_minute = self.to_minutes()
        if offset < 0 or offset + minutes > per_minute.size:
            raise DataError(
                f"price series {self.start:%Y-%m-%d %H:%M} (+{self.n_hours} h) does not cover "
                f"{minutes} minutes from {begin:%Y-%m-%d %H:%M}"
            )
        return per_minute[offset : offset + minutes]


@dataclass
class TransitionCounts:
    """Per-minute-of-day transition counts n_jk(s).

    `n[j-1, k-1, s-1]` counts observed transitions from state j at minute s to
    state k at the following minute.
    """

    n: np.ndarray
    day_filter: DayFilter = "all"
    _z: np.ndarray | None = field(default=None, init=False, repr=False)

    @property
    def n_symbols(self) -> int:
        return int(self.n.shape[0])

    @property
    def z(self) -> np.ndarray:
        """Number of trials z_j(s) = sum_k n_jk(s), shape (n_symbols, 1440)."""
        if self._z is None:
            self._z = self.n.sum(axis=1)
        return self._z

    @property
    def total(self) -> int:
        return int(self.n.sum())

    def successes(self, from_state: int) -> np.ndarray:
        """Transitions leaving `from_state` at each minute (z_j(s) - n_jj(s))."""
        j = from_state - 1
        return self.z[j] - self.n[j, j]

    def __add__(self, other: "TransitionCounts") -> "TransitionCounts":
        if self.n.shape != other.n.shape:
            raise ValueError(f"cannot add counts of shape {self.n.shape} and {other.n.shape}")
        day_filter = self.day_filter if self.day_filter == other.day_filter else "all"
        return TransitionCounts(self.n + other.n, day_filter)


def _read_csv(raw: str, header: tuple[str, str], what: str) -> pd.DataFrame:
    if not raw.strip():
        raise DataError(f"empty {what}")
    try:
        frame = pd.read_csv(
            io.StringIO(raw), dtype=str, keep_default_na=False, skipinitialspace=True
        )
    except pd.errors.ParserError as exc:
        raise DataError(f"malformed row: {exc}") from exc
    columns = tuple(str(c).strip() for c in frame.columns)
    if columns != header:
        raise DataError(f"expected header {','.join(header)!r}, got {','.join(columns)!r}", 1)
    if frame.empty:
        raise DataError(f"empty {what}")
    return frame


def _parse_timestamps(values: pd.Series) -> pd.DatetimeIndex:
    parsed = pd.to_datetime(values.str.strip(), format="ISO8601", errors="coerce")
    bad = parsed.isna().to_numpy()
    if bad.any():
        row = int(np.argmax(bad))
        raise DataError(f"malformed timestamp {values.iloc[row]!r}", row + 2)
    index = pd.DatetimeIndex(parsed)
    if index.tz is not None:
        index = index.tz_localize(None)
    return index


def _check_step(index: pd.DatetimeIndex, step: timedelta) -> None:
    if len(index) < 2:
        return
    deltas = np.diff(index.asi8)
    expected = int(pd.Timedelta(step).value)
    wrong = deltas != expected
    if wrong.any():
        row = int(np.argmax(wrong)) + 1
        gap = pd.Timedelta(int(deltas[row - 1]), unit="ns")
        raise DataError(f"non-contiguous timestamps (step of {gap} instead of {step})", row + 2)


def parse_trace(raw: str, n_symbols: int = 2) -> DrivingTrace:
    """Parse a trip log document into a validated DrivingTrace.

    Raises:
        DataError: malformed rows, non-contiguous timestamps or unknown state ids,
            naming the offending line.
    """
    frame = _read_csv(raw, TRACE_HEADER, "trace")
    index = _parse_timestamps(frame["timestamp"])
    if (index.second != 0).any():
        row = int(np.argmax(index.second != 0))
        raise DataError("timestamp is not on a minute boundary", row + 2)
    states = pd.to_numeric(frame["state"].str.strip(), errors="coerce").to_numpy()
    bad = ~np.isfinite(states) | (states != np.round(states))
    if bad.any():
        row = int(np.argmax(bad))
        raise DataError(f"malformed state {frame['state'].iloc[row]!r}", row + 2)
    unknown = (states < 1) | (states > n_symbols)
    if unknown.any():
        row = int(np.argmax(unknown))
        raise DataError(f"unknown state id {int(states[row])}", row + 2)
    _check_step(index, timedelta(minutes=1))
    return DrivingTrace(index[0].to_pydatetime(), states.astype(np.int64), n_symbols)


def serialize_trace(trace: DrivingTrace) -> str:
    """Canonical CSV form of a trace; `parse_trace` inverts it."""
    frame = pd.DataFrame({"timestamp": trace.timestamps, "state": trace.states})
    return frame.to_csv(index=False, date_format=TIMESTAMP_FORMAT, lineterminator="\n")


def load_trace(path: str | Path, n_symbols: int = 2) -> DrivingTrace:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"trip log not found: {path}")
    trace = parse_trace(path.read_text(), n_symbols)
    logger.info("Loaded %d minutes of driving data from %s", trace.n_minutes, path)
    return trace


def write_trace(trace: DrivingTrace, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(serialize_trace(trace))
    return path


def parse_prices(raw: str) -> PriceSeries:
    """Parse an hourly price document.

    Raises:
        DataError: malformed rows, missing hours or non-numeric prices.
    """
    frame = _read_csv(raw, PRICE_HEADER, "price series")
    index = _parse_timestamps(frame["timestamp"])
    off_hour = (index.minute != 0) | (index.second != 0)
    if off_hour.any():
        row = int(np.argmax(off_hour))
        raise DataError("price timestamp is not on an hour boundary", row + 2)
    prices = pd.to_numeric(frame["price_eur_mwh"].str.strip(), errors="coerce").to_numpy()
    bad = ~np.isfinite(prices)
    if bad.any():
        row = int(np.argmax(bad))
        raise DataError(f"malformed price {frame['price_eur_mwh'].iloc[row]!r}", row + 2)
    _check_step(index, timedelta(hours=1))
    return PriceSeries(index[0].to_pydatetime(), prices)


def serialize_prices(prices: PriceSeries) -> str:
    stamps = pd.date_range(prices.start, periods=prices.n_hours, freq="h")
    frame = pd.DataFrame({"timestamp": stamps, "price_eur_mwh": prices.hourly_prices})
    return frame.to_csv(
        index=False, date_format=TIMESTAMP_FORMAT, lineterminator="\n", float_format="%.4f"
    )


def load_prices(path: str | Path) -> PriceSeries:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"price series not found: {path}")
    prices = parse_prices(path.read_text())
    logger.info("Loaded %d hourly prices from %s", prices.n_hours, path)
    return prices


def write_prices(prices: PriceSeries, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(serialize_prices(prices))
    return path


def split_train_test(trace: DrivingTrace, split_date: date) -> tuple[DrivingTrace, DrivingTrace]:
    """Split a trace at 00:00 of `split_date`.

    The training part ends with the minute before `split_date` 00:00; both
    parts must be non-empty.
    """
    boundary = datetime.combine(split_date, time())
    offset = int((boundary - trace.start) / timedelta(minutes=1))
    if offset <= 0 or offset >= trace.n_minutes:
        raise DataError(
            f"split date {split_date} is outside the trace span "
            f"{trace.start:%Y-%m-%d %H:%M} .. {trace.end:%Y-%m-%d %H:%M}"
        )
    return trace.slice(0, offset), trace.slice(offset)


def count_transitions(trace: DrivingTrace, day_filter: DayFilter = "weekday") -> TransitionCounts:
    """Accumulate n_jk(s) over all days passing `day_filter`.

    A transition from minute t to t+1 is attributed to the minute-of-day of t,
    so the transition across midnight belongs to s=1440 of the earlier day.
    """
    if day_filter not in get_args(DayFilter):
        raise ValueError(f"Invalid day filter: {day_filter}. Needs to be one of {get_args(DayFilter)}")

    k = trace.n_symbols
    n = np.zeros((k, k, MINUTES_PER_DAY), dtype=np.int64)
    if trace.n_minutes < 2:
        return TransitionCounts(n, day_filter)

    from_states = trace.states[:-1] - 1
    to_states = trace.states[1:] - 1
    minutes = trace.minute_of_day[:-1] - 1
    if day_filter == "all":
        keep = np.ones(from_states.size, dtype=bool)
    else:
        weekday = trace.day_labels[:-1]
        keep = weekday if day_filter == "weekday" else ~weekday

    np.add.at(n, (from_states[keep], to_states[keep], minutes[keep]), 1)
    logger.debug("Counted %d transitions (%s days)", int(keep.sum()), day_filter)
    return TransitionCounts(n, day_filter)
