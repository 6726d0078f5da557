"""Target-set schedules ``B_1, B_2, ...`` for hit counting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sbclab.map_core import Interval, MapParams, preimage_interval

KINDS = ("fixed", "listed", "kim")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class IntervalSchedule:
    """Rule producing the interval ``B_k`` for every ``k >= 1``.

    ``fixed`` uses one interval throughout, ``listed`` cycles through a
    finite list, and ``kim`` is the shrinking schedule
    ``B_k = (0, k^{1/(alpha-1)}]`` attached to the neutral point.
    """

    kind: str
    intervals: tuple = ()
    alpha: float | None = None
    separation: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "kim":
            if self.alpha is None or not 0.0 < self.alpha < 1.0:
                raise ScheduleError("kim schedule needs alpha in (0, 1)")
        elif not self.intervals:
            raise ScheduleError(f"{self.kind} schedule needs at least one interval")
        if self.kind == "fixed" and len(self.intervals) != 1:
            raise ScheduleError("fixed schedule takes exactly one interval")

    @classmethod
    def fixed(cls, b: Interval, separation: float | None = None):
        return cls("fixed", (b,), separation=separation)

    @classmethod
    def listed(cls, bs, separation: float | None = None):
        return cls("listed", tuple(bs), separation=separation)

    @classmethod
    def kim(cls, alpha: float):
        return cls("kim", alpha=float(alpha))

    @property
    def exponent(self) -> float:
        """Kim exponent ``1/(alpha - 1)``."""
        return 1.0 / (self.alpha - 1.0)

    @property
    def d(self) -> float:
        """Separation from the neutral point: the configured value, else min lo."""
        if self.kind == "kim":
            return 0.0
        if self.separation is not None:
            return float(self.separation)
        return min(b.lo for b in self.intervals)

    def interval(self, k: int) -> Interval:
        """``B_k`` for 1-based ``k``."""
        if k < 1:
            raise ValueError("schedule indices start at 1")
        if self.kind == "kim":
            return Interval(0.0, float(k) ** self.exponent)
        return self.intervals[(k - 1) % len(self.intervals)]

    def bounds(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Arrays of lower and upper endpoints of ``B_1..B_n``."""
        if self.kind == "kim":
            k = np.arange(1, n + 1, dtype=float)
            return np.zeros(n), k**self.exponent
        lo = np.array([b.lo for b in self.intervals])
        hi = np.array([b.hi for b in self.intervals])
        idx = np.arange(n) % len(self.intervals)
        return lo[idx], hi[idx]

    def require_separated(self):
        """Reject schedules that touch the neutral point (``lo >= d > 0`` needed)."""
        if self.kind == "kim":
            raise ScheduleError("kim schedule is attached to 0 and cannot be separated")
        d = self.d
        if d <= 0.0:
            raise ScheduleError("separation d must be positive")
        low = min(b.lo for b in self.intervals)
        if low < d:
            raise ScheduleError(f"interval with lo={low} lies below the separation d={d}")

    def pulled_back(self, params: MapParams) -> tuple["IntervalSchedule", "IntervalSchedule"]:
        """Left- and right-branch parts of ``T^{-1} B_k`` as two schedules."""
        if self.kind == "kim":
            raise ScheduleError("pullback is defined for fixed and listed schedules")
        parts = [preimage_interval(params, b) for b in self.intervals]
        return (
            IntervalSchedule(self.kind, tuple(p[0] for p in parts)),
            IntervalSchedule(self.kind, tuple(p[1] for p in parts)),
        )

    def describe(self) -> dict:
        if self.kind == "kim":
            return {"kind": "kim", "alpha": self.alpha, "exponent": self.exponent}
        return {
            "kind": self.kind,
            "intervals": [str(b) for b in self.intervals],
            "separation": self.d,
        }
