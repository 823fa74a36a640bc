"""ISO-week calendar types and the weekly count series container."""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError


def weeks_in_year(year: int) -> int:
    """Number of ISO weeks (52 or 53) in a Gregorian year."""
    # 28 December always falls in the last ISO week of its year.
    return _dt.date(year, 12, 28).isocalendar()[1]


@dataclass(frozen=True, order=True)
class WeekIndex:
    """An ISO (year, week) pair. Ordering is lexicographic on (year, week)."""

    year: int
    week: int

    def __post_init__(self) -> None:
        if not isinstance(self.year, int) or not isinstance(self.week, int):
            raise DataError(f"week index must be integer (year, week), got {self!r}")
        if not 1 <= self.week <= weeks_in_year(self.year):
            raise DataError(
                f"week {self.week} out of range 1..{weeks_in_year(self.year)} "
                f"for ISO year {self.year}"
            )

    def _monday(self) -> _dt.date:
        return _dt.date.fromisocalendar(self.year, self.week, 1)

    def __add__(self, n: int) -> "WeekIndex":
        iso = (self._monday() + _dt.timedelta(weeks=n)).isocalendar()
        return WeekIndex(iso[0], iso[1])

    def __sub__(self, other: "WeekIndex") -> int:
        """Signed number of weeks from `other` to `self`."""
        return (self._monday() - other._monday()).days // 7

    def next(self) -> "WeekIndex":
        return self + 1

    def __str__(self) -> str:
        return f"{self.year}-W{self.week:02d}"


def week_range(start: WeekIndex, length: int) -> Iterator[WeekIndex]:
    """Yield `length` consecutive weeks starting at `start`."""
    current = start
    for _ in range(length):
        yield current
        current = current + 1


@dataclass(frozen=True)
class WeeklySeries:
    """Contiguous weekly non-negative integer counts starting at `start`."""

    start: WeekIndex
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(self.counts)
        for k, value in enumerate(counts):
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise DataError(
                    f"count at offset {k} (week {self.start + k}) is not an integer: {value!r}"
                )
            if value < 0:
                raise DataError(
                    f"count at offset {k} (week {self.start + k}) is negative: {value}"
                )
        object.__setattr__(self, "counts", tuple(int(v) for v in counts))
        object.__setattr__(self, "_array", np.asarray(self.counts, dtype=float))

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def end(self) -> WeekIndex:
        """Week of the final observation."""
        if not self.counts:
            raise DataError("empty series has no end week")
        return self.start + (len(self.counts) - 1)

    def week_at(self, offset: int) -> WeekIndex:
        return self.start + offset

    def weeks(self) -> Iterator[WeekIndex]:
        return week_range(self.start, len(self.counts))

    def values(self) -> np.ndarray:
        """Counts as a float array (shared, do not mutate)."""
        return self._array  # type: ignore[attr-defined]

    def head(self, n: int) -> "WeeklySeries":
        """First `n` observations as a series with the same start."""
        if not 0 <= n <= len(self.counts):
            raise DataError(f"cannot take first {n} of {len(self.counts)} observations")
        return WeeklySeries(self.start, self.counts[:n])


def series_from_values(start: WeekIndex, values: Iterable[int]) -> WeeklySeries:
    return WeeklySeries(start, tuple(values))
