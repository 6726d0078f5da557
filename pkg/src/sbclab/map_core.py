"""The intermittent map T_alpha, its inverse branches and orbit statistics.

The map acts on (0, 1] by

    T(x) = x (1 + (2x)^alpha)   for x in (0, 1/2]
    T(x) = 2x - 1               for x in (1/2, 1]

and has a neutral fixed point at 0.  Every interval in this package is
half-open, ``(lo, hi]``, so the two branch domains partition (0, 1] and
preimages are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sbclab import _kernels

BRANCH_CUT = 0.5


class DomainError(ValueError):
    """Raised when a point or parameter lies outside the map's domain."""


class ConvergenceError(RuntimeError):
    """The left-branch inversion failed to converge (a bug, not a user error)."""


@dataclass(frozen=True)
class MapParams:
    """Exponent of the intermittent map; ``beta = 1/alpha`` is derived."""

    alpha: float
    branch_cut: float = field(default=BRANCH_CUT, init=False)

    def __post_init__(self):
        alpha = float(self.alpha)
        if not 0.0 < alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        object.__setattr__(self, "alpha", alpha)

    @property
    def beta(self) -> float:
        return 1.0 / self.alpha


@dataclass(frozen=True)
class Interval:
    """Half-open interval ``(lo, hi]`` inside [0, 1]."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not 0.0 <= lo < hi <= 1.0:
            raise DomainError(f"need 0 <= lo < hi <= 1, got ({self.lo!r}, {self.hi!r}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def contains(self, x):
        x = np.asarray(x)
        return (self.lo < x) & (x <= self.hi)

    @classmethod
    def parse(cls, text: str) -> "Interval":
        """Parse ``"lo:hi"``."""
        try:
            lo, hi = (float(part) for part in text.split(":"))
        except ValueError:
            raise DomainError(f"interval must be written lo:hi, got {text!r}") from None
        return cls(lo, hi)

    def __str__(self):
        return f"{self.lo!r}:{self.hi!r}"


@dataclass(frozen=True)
class PartitionTable:
    """Points ``a_0 = 1/2 > a_1 > ...`` with ``T(a_{j+1}) = a_j``."""

    points: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0 or pts[0] != BRANCH_CUT:
            raise ValueError("partition table must start at 1/2")
        if np.any(np.diff(pts) >= 0):
            raise ValueError("partition points must decrease strictly")

    def __len__(self):
        return len(self.points)

    def __getitem__(self, j):
        return self.points[j]


def _check_domain(x, *, allow_zero=False):
    x = np.asarray(x, dtype=float)
    low_ok = (x >= 0.0) if allow_zero else (x > 0.0)
    if not np.all(low_ok & (x <= 1.0)):
        raise DomainError("points must lie in (0, 1]")
    return x


def apply(params: MapParams, x):
    """Evaluate T_alpha at a scalar or array ``x`` in (0, 1]."""
    xa = _check_domain(x)
    a = params.alpha
    out = np.where(xa <= BRANCH_CUT, xa * (1.0 + (2.0 * xa) ** a), 2.0 * xa - 1.0)
    return float(out) if out.ndim == 0 else out


def invert_right(y):
    """Inverse of the right branch: ``(y + 1) / 2`` in (1/2, 1]."""
    ya = _check_domain(y)
    out = 0.5 * (ya + 1.0)
    return float(out) if out.ndim == 0 else out


def invert_left(params: MapParams, y, *, allow_zero=False):
    """Inverse of the left branch, mapping (0, 1] onto (0, 1/2].

    Bracketed bisection down to a relative width of 1e-12, then at most
    five safeguarded Newton steps.  A Newton iterate that leaves the
    bracket is replaced by the bracket midpoint.

    ``allow_zero`` extends the inverse continuously to ``y = 0`` (the neutral
    fixed point), which is needed for interval endpoints.
    """
    ya = _check_domain(y, allow_zero=allow_zero)
    a = params.alpha
    scalar = ya.ndim == 0
    ya = np.atleast_1d(ya)

    # T(x) lies between x and 2x on (0, 1/2]
    lo = 0.5 * ya
    hi = np.minimum(ya, BRANCH_CUT)

    def resid(x):
        return x * (1.0 + (2.0 * x) ** a) - ya

    for _ in range(64):
        if np.all(hi - lo <= 1e-12 * hi):
            break
        mid = 0.5 * (lo + hi)
        above = resid(mid) > 0.0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    else:
        raise ConvergenceError("bisection did not shrink the bracket")

    x = 0.5 * (lo + hi)
    for _ in range(5):
        r = resid(x)
        slope = 1.0 + (1.0 + a) * (2.0 * x) ** a
        step = r / slope
        cand = x - step
        inside = (cand >= lo) & (cand <= hi)
        hi = np.where(r > 0.0, x, hi)
        lo = np.where(r < 0.0, x, lo)
        cand = np.where(inside, cand, 0.5 * (lo + hi))
        done = np.abs(cand - x) <= 4e-16 * np.maximum(x, 1e-300)
        x = cand
        if np.all(done):
            break
    # clamp in zero case: T(0) = 0
    x = np.where(ya == 0.0, 0.0, x)
    if not np.all(np.abs(resid(x)) <= 1e-13 * np.maximum(ya, 1e-300) + 1e-15):
        raise ConvergenceError("left-branch inversion did not reach tolerance")
    return float(x[0]) if scalar else x


def preimage_interval(params: MapParams, b: Interval) -> tuple[Interval, Interval]:
    """Split ``T^{-1}(b)`` into its left-branch and right-branch parts."""
    left_lo = invert_left(params, b.lo, allow_zero=True)
    left_hi = invert_left(params, b.hi)
    right = Interval(0.5 * (b.lo + 1.0), 0.5 * (b.hi + 1.0))
    return Interval(left_lo, left_hi), right


def partition_points(params: MapParams, k: int) -> PartitionTable:
    """Return ``a_0 = 1/2`` and its successive left-branch preimages up to ``a_k``."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    pts = [BRANCH_CUT]
    for _ in range(k):
        pts.append(invert_left(params, pts[-1]))
    return PartitionTable(tuple(pts))


def stagnation_threshold(params: MapParams) -> float:
    """Approximate point below which ``T(x) == x`` in double precision.

    There the increment ``x (2x)^alpha`` is under half an ulp of ``x``,
    so floating-point orbits stay put instead of escaping the neutral point.
    """
    return 0.5 * 2.0 ** (-53.0 / params.alpha)


def orbit(params: MapParams, x0: float, n: int) -> np.ndarray:
    """``[x0, T x0, ..., T^n x0]``; only meant for short diagnostic runs."""
    _check_domain(x0)
    return _kernels.orbit(float(x0), params.alpha, int(n))


def iterate_hits(params: MapParams, x0: float, schedule, n: int) -> np.ndarray:
    """Bits ``1[T^k x0 in B_k]`` for ``k = 1..n`` as a uint8 array.

    ``schedule`` is anything with a ``bounds(n)`` method returning the
    arrays of lower and upper endpoints of ``B_1..B_n``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    _check_domain(x0)
    lo, hi = schedule.bounds(n)
    return _kernels.hits(float(x0), params.alpha, lo, hi)


def hit_matrix(params: MapParams, x0s, schedule, n: int) -> np.ndarray:
    """Ensemble version of :func:`iterate_hits`: one row per starting point."""
    x0s = _check_domain(np.atleast_1d(x0s))
    lo, hi = schedule.bounds(n)
    return _kernels.hit_matrix(x0s, params.alpha, lo, hi)
