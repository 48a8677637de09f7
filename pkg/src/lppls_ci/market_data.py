"""Daily close-price series indexed by trading day."""
from __future__ import annotations

import bisect
import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or invalid price data."""


@dataclass(frozen=True, eq=False)
class PriceSeries:
    """Ordered daily closes; index ``i`` is the i-th observed trading day.

    Weekends and holidays never appear: the calendar is exactly the set of
    rows supplied.
    """

    dates: tuple[dt.date, ...]
    closes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        closes = np.array(self.closes, dtype=float)
        if closes.ndim != 1 or len(closes) != len(self.dates):
            raise DataError("dates and closes must be 1-D and of equal length")
        if not np.all(np.isfinite(closes)) or np.any(closes <= 0.0):
            bad = int(np.flatnonzero(~(np.isfinite(closes) & (closes > 0.0)))[0])
            raise DataError(f"non-positive or non-finite close at index {bad}: {closes[bad]!r}")
        for i in range(1, len(self.dates)):
            if self.dates[i] <= self.dates[i - 1]:
                raise DataError(f"dates not strictly increasing at index {i}: {self.dates[i]}")
        closes.setflags(write=False)
        object.__setattr__(self, "closes", closes)
        object.__setattr__(self, "_log", _readonly(np.log(closes)))
        object.__setattr__(self, "_pos", {d: i for i, d in enumerate(self.dates)})

    @classmethod
    def from_pairs(cls, rows: Iterable[tuple[dt.date, float]]) -> "PriceSeries":
        rows = sorted(rows, key=lambda r: r[0])
        for a, b in zip(rows, rows[1:]):
            if a[0] == b[0]:
                raise DataError(f"duplicate date {a[0]}")
        return cls(tuple(r[0] for r in rows), np.array([r[1] for r in rows], dtype=float))

    def __len__(self) -> int:
        return len(self.dates)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PriceSeries):
            return NotImplemented
        return self.dates == other.dates and np.array_equal(self.closes, other.closes)

    @property
    def log_prices(self) -> np.ndarray:
        """Read-only view of ln(close) for every trading day."""
        return self._log

    def log_price(self, i: int) -> float:
        return log_price(self, i)

    def date_of(self, i: int) -> dt.date:
        _check_index(self, i)
        return self.dates[i]

    def index_of(self, date: dt.date | str) -> int:
        if isinstance(date, str):
            date = dt.date.fromisoformat(date)
        try:
            return self._pos[date]
        except KeyError:
            raise KeyError(f"{date} is not a trading day of this series") from None

    def index_on_or_before(self, date: dt.date | str) -> int:
        """Last trading-day index whose date is <= ``date``."""
        if isinstance(date, str):
            date = dt.date.fromisoformat(date)
        i = bisect.bisect_right(self.dates, date) - 1
        if i < 0:
            raise KeyError(f"{date} precedes the first observation")
        return i

    def window(self, t1: int, t2: int) -> np.ndarray:
        """Log prices on the closed index range [t1, t2]."""
        _check_index(self, t1)
        _check_index(self, t2)
        return self._log[t1 : t2 + 1]

    def truncate(self, last: int) -> "PriceSeries":
        """Observations with index <= ``last``."""
        _check_index(self, last)
        return PriceSeries(self.dates[: last + 1], self.closes[: last + 1])

    def date_at(self, t: float) -> dt.date:
        """Calendar date for a possibly fractional trading-day time.

        Times beyond the last observation are extrapolated on the weekday
        calendar (critical times usually lie in the future).
        """
        i = int(math.floor(t + 0.5))
        if 0 <= i < len(self):
            return self.dates[i]
        if i < 0:
            return _add_weekdays(self.dates[0], i)
        return _add_weekdays(self.dates[-1], i - (len(self) - 1))


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _check_index(series: PriceSeries, i: int) -> None:
    if not 0 <= i < len(series):
        raise IndexError(f"trading-day index {i} out of range [0, {len(series)})")


def _add_weekdays(start: dt.date, k: int) -> dt.date:
    step = 1 if k >= 0 else -1
    d = start
    for _ in range(abs(k)):
        d += dt.timedelta(days=step)
        while d.weekday() >= 5:
            d += dt.timedelta(days=step)
    return d


def weekday_calendar(start: dt.date, n: int) -> tuple[dt.date, ...]:
    """``n`` consecutive weekdays starting on or after ``start``."""
    d = start
    while d.weekday() >= 5:
        d += dt.timedelta(days=1)
    out = [d]
    for _ in range(n - 1):
        out.append(_add_weekdays(out[-1], 1))
    return tuple(out[:n])


def log_price(series: PriceSeries, i: int) -> float:
    """Natural log of the close at trading-day index ``i``."""
    _check_index(series, i)
    return float(series.log_prices[i])


def load_csv(
    path: str | Path,
    date_column: str = "date",
    price_column: str = "close",
    date_format: str | None = None,
) -> PriceSeries:
    """Read a headed UTF-8 CSV into a :class:`PriceSeries`.

    Rows may come in any order; they are sorted by date. Dates are ISO-8601
    unless ``date_format`` (a ``strptime`` pattern) is given. Errors name the
    offending line (the header is line 1).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (date_column, price_column):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r} (have {header})")
        rows: list[tuple[dt.date, float]] = []
        seen: dict[dt.date, int] = {}
        for row in reader:
            line = reader.line_num
            raw_d, raw_p = row[date_column], row[price_column]
            try:
                if date_format:
                    d = dt.datetime.strptime(raw_d.strip(), date_format).date()
                else:
                    d = dt.date.fromisoformat(raw_d.strip())
            except (ValueError, AttributeError):
                raise DataError(f"{path}:{line}: unparseable date {raw_d!r}") from None
            try:
                p = float(raw_p)
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line}: unparseable price {raw_p!r}") from None
            if not math.isfinite(p) or p <= 0.0:
                raise DataError(f"{path}:{line}: price must be positive and finite, got {raw_p!r}")
            if d in seen:
                raise DataError(f"{path}:{line}: duplicate date {d} (first on line {seen[d]})")
            seen[d] = line
            rows.append((d, p))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return PriceSeries.from_pairs(rows)


def write_csv(series: PriceSeries, path: str | Path, date_column: str = "date",
              price_column: str = "close") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([date_column, price_column])
        for d, p in zip(series.dates, series.closes):
            w.writerow([d.isoformat(), repr(float(p))])


def from_arrays(dates: Sequence[dt.date], closes: Sequence[float]) -> PriceSeries:
    return PriceSeries.from_pairs(zip(dates, map(float, closes)))
