"""Counting series, deviation envelopes and dependence checks.

Conventions: ``log`` is the natural logarithm; envelope entries whose
logarithms are undefined are NaN.  Hit ensembles are 2-D uint8 arrays with
one row per trajectory and column ``k - 1`` holding the indicator of
``A_k``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

Z_ONE_SIDED_99 = 2.3263478740408408


class CertificateError(ValueError):
    """A correlation certificate violates the preconditions of the g construction."""


# --------------------------------------------------------------------------
# series


def cumulative_counts(hits) -> np.ndarray:
    """``S_n``: prefix sums of the hit bits along the last axis."""
    hits = np.asarray(hits)
    if hits.size == 0:
        raise ValueError("empty hit series")
    return np.cumsum(hits, axis=-1, dtype=np.int64)


def expected_counts(probs) -> np.ndarray:
    """``E_n``: prefix sums of the event probabilities."""
    p = np.asarray(probs, dtype=float)
    if p.size == 0:
        raise ValueError("empty probability series")
    if np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("event probabilities must lie in [0, 1]")
    return np.cumsum(p)


# --------------------------------------------------------------------------
# growth and weight functions


@dataclass(frozen=True)
class GrowthFunction:
    """Variance growth bound ``g`` with the exponent slack ``delta``."""

    func: Callable
    delta: float = 0.5
    name: str = "g"

    def __call__(self, x):
        return self.func(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class WeightFunction:
    func: Callable
    name: str = "psi"

    def __call__(self, x):
        return self.func(np.asarray(x, dtype=float))


def power_growth(exponent: float, scale: float = 1.0, delta: float | None = None) -> GrowthFunction:
    if delta is None:
        delta = min(max((2.0 - exponent) / 2.0, 1e-3), 0.999)
    return GrowthFunction(lambda x: scale * x**exponent, delta, f"pow:{exponent:g}")


def log_power_weight(exponent: float) -> WeightFunction:
    """``psi(x) = log(e + x)^exponent``."""
    return WeightFunction(lambda x: np.log(math.e + x) ** exponent, f"logpow:{exponent:g}")


def power_weight(exponent: float) -> WeightFunction:
    return WeightFunction(lambda x: np.maximum(x, 1.0) ** exponent, f"pow:{exponent:g}")


def constant_weight(value: float = 1.0) -> WeightFunction:
    return WeightFunction(lambda x: np.full(np.shape(x), float(value)), f"const:{value:g}")


# --------------------------------------------------------------------------
# envelopes


def envelope_theorem1(E, g: GrowthFunction, psi: WeightFunction) -> np.ndarray:
    """``sqrt(g(E) psi(log E)) (log E)^{3/2}``; NaN where ``E <= 1``."""
    E = np.asarray(E, dtype=float)
    out = np.full(E.shape, np.nan)
    ok = E > 1.0
    e = E[ok]
    le = np.log(e)
    out[ok] = np.sqrt(g(e) * psi(le)) * le**1.5
    return out


def envelope_corollary1(E, gamma: float, eps: float) -> np.ndarray:
    """``E^{(1+gamma)/2} (log E)^{3/2} (log log E)^{(1+eps)/2}``; NaN where ``E <= e``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    E = np.asarray(E, dtype=float)
    out = np.full(E.shape, np.nan)
    ok = E > math.e
    e = E[ok]
    le = np.log(e)
    out[ok] = e ** ((1.0 + gamma) / 2.0) * le**1.5 * np.log(le) ** ((1.0 + eps) / 2.0)
    return out


# --------------------------------------------------------------------------
# correlation certificates and g = x f^{-1}(x)


@dataclass(frozen=True)
class CorrelationCertificate:
    """Pairwise bound ``P(A_j A_i) <= (1 + c(i-j)) p_j p_i + C b(i-j) p_j``."""

    c: Callable
    b: Callable
    C: float = 1.0
    name: str = "certificate"

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("certificate constant C must be positive")

    def bound(self, gap, p_first, p_second):
        gap = np.asarray(gap, dtype=float)
        return (1.0 + self.c(gap)) * p_first * p_second + self.C * self.b(gap) * p_first


def power_certificate(a: float, scale: float = 1.0, b_exponent: float = 2.0, C: float = 1.0):
    """``c(x) = scale x^{-a}`` with summable ``b_n = n^{-b_exponent}``."""
    return CorrelationCertificate(
        c=lambda x: scale * np.asarray(x, dtype=float) ** (-a),
        b=lambda n: np.asarray(n, dtype=float) ** (-b_exponent),
        C=C,
        name=f"pow:{-a:g}",
    )


def gouezel_certificate(alpha: float, C1: float = 1.0, C: float = 1.0) -> CorrelationCertificate:
    """``c(x) = C1 x^{1 - beta}``, ``b_n = n^{-beta}`` with ``beta = 1/alpha``."""
    beta = 1.0 / alpha
    return CorrelationCertificate(
        c=lambda x: C1 * np.asarray(x, dtype=float) ** (1.0 - beta),
        b=lambda n: np.asarray(n, dtype=float) ** (-beta),
        C=C,
        name=f"gouezel:{alpha:g}",
    )


def zero_certificate() -> CorrelationCertificate:
    zero = lambda x: np.zeros(np.shape(x))  # noqa: E731
    return CorrelationCertificate(c=zero, b=zero, C=1.0, name="zero")


def _check_certificate(cert, grid):
    cv = np.asarray(cert.c(grid), dtype=float)
    if np.any(~np.isfinite(cv)) or np.any(cv <= 0.0):
        raise CertificateError("c must be positive on the validation grid")
    if np.any(np.diff(cv) > 1e-12 * cv[:-1]):
        raise CertificateError("c must be non-increasing")
    if not cv[-1] < 0.5 * cv[0]:
        raise CertificateError("c does not decay toward 0 on the validation grid")
    fv = grid / cv
    if np.any(np.diff(fv) <= 0.0):
        raise CertificateError("f(x) = x / c(x) must be strictly increasing")


def _invert_increasing(f, y, rtol):
    """Solve ``f(x) = y`` for positive ``x`` by geometric bracketing and bisection."""
    y = np.asarray(y, dtype=float)
    lo = np.ones_like(y)
    hi = np.ones_like(y)
    for _ in range(4000):
        low = f(lo) > y
        if not low.any():
            break
        lo = np.where(low, lo / 4.0, lo)
    for _ in range(4000):
        high = f(hi) < y
        if not high.any():
            break
        hi = np.where(high, hi * 4.0, hi)
    for _ in range(400):
        if np.all(hi <= lo * (1.0 + rtol)):
            break
        mid = np.sqrt(lo) * np.sqrt(hi)
        up = f(mid) < y
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    return np.sqrt(lo) * np.sqrt(hi)


def g_from_c(
    cert: CorrelationCertificate,
    delta: float | None = None,
    rtol: float = 1e-13,
    grid=None,
) -> GrowthFunction:
    """Growth function ``g(x) = x f^{-1}(x)`` with ``f(x) = x / c(x)``.

    ``f^{-1}`` is evaluated numerically.  ``delta`` defaults to half the
    slack between 2 and the largest local log-slope of ``g`` on the grid.
    """
    if grid is None:
        grid = np.logspace(-3, 12, 1501)
    _check_certificate(cert, grid)

    def f(x):
        return x / cert.c(x)

    def g(x):
        x = np.asarray(x, dtype=float)
        return x * _invert_increasing(f, x, rtol)

    if delta is None:
        xs = np.logspace(0, 12, 121)
        slopes = np.diff(np.log(g(xs))) / np.diff(np.log(xs))
        delta = float(np.clip((2.0 - slopes.max()) / 2.0, 1e-3, 0.999))
    return GrowthFunction(g, delta, f"x*finv[{cert.name}]")


# --------------------------------------------------------------------------
# validation diagnostics


def _nondecreasing_violation(x, y, rtol=1e-10):
    bad = np.flatnonzero(np.diff(y) < -rtol * np.abs(y[:-1]))
    return None if bad.size == 0 else float(x[bad[0] + 1])


def validate_growth(g: GrowthFunction, grid=None) -> dict:
    """Check that ``g(x)/x`` and ``x^{2-delta}/g(x)`` are non-decreasing on a log grid."""
    if grid is None:
        grid = np.logspace(0, 12, 2401)
    gv = g(grid)
    first = _nondecreasing_violation(grid, gv / grid)
    second = _nondecreasing_violation(grid, grid ** (2.0 - g.delta) / gv)
    return {
        "check": "growth",
        "g": g.name,
        "delta": g.delta,
        "g_over_x_nondecreasing": first is None,
        "first_violation_g_over_x": first,
        "x_pow_over_g_nondecreasing": second is None,
        "first_violation_x_pow_over_g": second,
        "passed": first is None and second is None,
    }


def validate_psi(psi: WeightFunction, horizon: int = 10**6) -> dict:
    """Heuristic summability gate for ``sum 1/(n psi(n))``.

    The dyadic block increments ``I_k`` are the Cauchy increments of the
    partial sums.  They are read as convergent when, over the later blocks,
    they decay geometrically at a steady rate or faster than ``1/k``.
    This is a diagnostic, not a proof.
    """
    if horizon < 1000:
        raise ValueError("horizon must be at least 1000")
    n = np.arange(1, horizon + 1, dtype=float)
    pv = psi(n)
    nondecreasing = _nondecreasing_violation(n, pv) is None
    partial = np.cumsum(1.0 / (n * pv))
    kmax = int(math.floor(math.log2(horizon + 1))) - 1
    ks = np.arange(0, kmax + 1)
    starts = 2**ks
    ends = 2 ** (ks + 1) - 1
    inc = partial[ends - 1] - np.concatenate(([0.0], partial[starts[1:] - 2]))
    tail = ks >= max(2, kmax // 2)
    kt = ks[tail].astype(float)
    lt = np.log(inc[tail])
    half = kt.size // 2
    rate_early = np.polyfit(kt[: half + 1], lt[: half + 1], 1)[0]
    rate_late = np.polyfit(kt[half:], lt[half:], 1)[0]
    geometric = rate_late < -0.03 and rate_late <= 0.8 * rate_early
    power = np.polyfit(np.log(kt), lt, 1)[0]
    fast_power = power < -1.1
    converges = bool(geometric or fast_power)
    return {
        "check": "psi",
        "psi": psi.name,
        "horizon": horizon,
        "psi_nondecreasing": nondecreasing,
        "partial_sum": float(partial[-1]),
        "last_block_increment": float(inc[-1]),
        "increment_geometric_rate": float(rate_late),
        "increment_power_exponent": float(power),
        "suspect_divergent": not converges,
        "passed": converges and nondecreasing,
    }


# --------------------------------------------------------------------------
# empirical checks on ensembles


def _jackknife_variance_se(d):
    """Sample variance and its jackknife standard error, O(n)."""
    d = np.asarray(d, dtype=float)
    n = d.size
    var = d.var(ddof=1)
    s1, s2 = d.sum(), (d * d).sum()
    m = (s1 - d) / (n - 1)
    loo = (s2 - d * d - (n - 1) * m * m) / (n - 2)
    se = math.sqrt((n - 1) / n * float(((loo - loo.mean()) ** 2).sum()))
    return float(var), se


def default_n0(E, threshold=10.0) -> int:
    """First ``n`` with ``E_n >= threshold`` (the "sufficiently large n" cutoff)."""
    idx = np.flatnonzero(np.asarray(E) >= threshold)
    return int(idx[0]) + 1 if idx.size else len(E) + 1


def empirical_variance_check(hits, probs, pairs, g: GrowthFunction, n0: int | None = None, z: float = 3.0) -> dict:
    """Compare ``Var(S_m - S_n)`` across the ensemble with ``g(E_m - E_n)``."""
    hits = np.asarray(hits)
    if hits.ndim != 2 or hits.shape[0] < 100:
        raise ValueError("need a 2-D ensemble with at least 100 trajectories")
    E = np.concatenate(([0.0], expected_counts(probs)))
    S = np.concatenate((np.zeros((hits.shape[0], 1), np.int64), cumulative_counts(hits)), axis=1)
    if n0 is None:
        n0 = default_n0(E[1:])
    rows, skipped = [], []
    for n, m in pairs:
        if not 0 <= n < m <= hits.shape[1]:
            raise ValueError(f"bad pair ({n}, {m})")
        dE = E[m] - E[n]
        if dE <= 0.0:
            skipped.append([n, m])
            continue
        var, se = _jackknife_variance_se(S[:, m] - S[:, n])
        bound = float(g(dE))
        rows.append(
            {
                "n": int(n),
                "m": int(m),
                "dE": float(dE),
                "variance": var,
                "ratio": var / bound,
                "ratio_se": se / bound,
                "counted": bool(n >= n0),
            }
        )
    counted = [r for r in rows if r["counted"]]
    consistent = all(r["ratio"] <= 1.0 + z * r["ratio_se"] for r in counted)
    return {
        "check": "variance",
        "g": g.name,
        "n0": int(n0),
        "pairs": rows,
        "skipped_degenerate": skipped,
        "max_ratio": max((r["ratio"] for r in counted), default=float("nan")),
        "consistent": bool(consistent and counted),
    }


def _pair_means(hits, cols_a, cols_b, w, chunk=4096):
    """Per-trajectory ``mean_k w_k hits[:, a_k] hits[:, b_k]``, in row chunks."""
    t = hits.shape[0]
    out = np.empty(t)
    for start in range(0, t, chunk):
        block = hits[start : start + chunk]
        prod = (block[:, cols_a] & block[:, cols_b]).astype(np.float32)
        out[start : start + chunk] = prod @ w / len(w)
    return out


def gap_excess(hits, probs, gaps):
    """Stationary pooled excess ``P(A_j A_{j+g}) / (p_j p_{j+g}) - 1`` per gap.

    Each trajectory contributes the average over all admissible ``j``; the
    standard error comes from the spread across (independent) trajectories.
    """
    hits = np.asarray(hits)
    p = np.asarray(probs, dtype=float)
    t, n = hits.shape
    ex, se = [], []
    for g in gaps:
        if not 0 < g < n:
            raise ValueError(f"gap {g} out of range")
        cols = np.arange(n - g)
        per = _pair_means(hits, cols, cols + g, 1.0 / (p[: n - g] * p[g:]))
        ex.append(per.mean() - 1.0)
        se.append(per.std(ddof=1) / math.sqrt(t))
    return np.array(ex), np.array(se)


def fit_decay_exponent(gaps, excess, se, min_gap: int = 4, z: float = 2.0):
    """Slope ``a`` of ``log|excess| ~ -a log(gap)`` over resolvable gaps."""
    gaps = np.asarray(gaps, dtype=float)
    ok = (gaps >= min_gap) & (np.abs(excess) > z * se) & (excess != 0)
    if ok.sum() < 3:
        return None, int(ok.sum())
    slope = np.polyfit(np.log(gaps[ok]), np.log(np.abs(excess[ok])), 1)[0]
    return float(-slope), int(ok.sum())


def pairwise_correlation_check(
    hits,
    probs,
    cert: CorrelationCertificate,
    index_pairs,
    z: float = Z_ONE_SIDED_99,
    min_power: float = 100.0,
    fit_min_gap: int = 4,
) -> dict:
    """Test ``P(A_j A_i) <= (1 + c(i-j)) p_j p_i + C b(i-j) p_j`` pair by pair.

    Index pairs are 1-based ``(j, i)`` with ``j < i``.  A pair is
    inconclusive (never a pass) when the ensemble has fewer than
    ``min_power / (p_j p_i)`` trajectories.  The excess of the pooled joint
    probability is also fitted against the gap; that slope estimates
    ``beta - 1`` for the intermittent map.
    """
    hits = np.asarray(hits)
    p = np.asarray(probs, dtype=float)
    t = hits.shape[0]
    pairs = np.asarray(index_pairs, dtype=int).reshape(-1, 2)
    j, i = pairs[:, 0], pairs[:, 1]
    if np.any(j >= i) or np.any(j < 1) or np.any(i > hits.shape[1]):
        raise ValueError("index pairs must satisfy 1 <= j < i <= N")
    gap = i - j
    pj, pi = p[j - 1], p[i - 1]
    joint = np.empty(len(pairs))
    for k in range(len(pairs)):
        joint[k] = np.count_nonzero(hits[:, j[k] - 1] & hits[:, i[k] - 1]) / t
    bound = cert.bound(gap, pj, pi)
    ref = np.clip(bound, 1.0 / t, 1.0)
    margin = z * np.sqrt(ref * (1.0 - ref) / t)
    powered = t * pj * pi >= min_power
    status = np.where(~powered, "inconclusive", np.where(joint <= bound + margin, "pass", "violation"))

    with np.errstate(divide="ignore", invalid="ignore"):
        implied_c = np.max(np.where(powered, (joint / (pj * pi) - 1.0) / cert.c(gap), -np.inf))
        resid = joint - (1.0 + cert.c(gap)) * pj * pi
        implied_C = np.max(np.where(powered, resid / (cert.b(gap) * pj), -np.inf))

    # pooled excess per gap from the pairs actually listed
    ugaps = np.unique(gap)
    ex = np.empty(ugaps.size)
    se = np.empty(ugaps.size)
    for k, g in enumerate(ugaps):
        sel = gap == g
        per = _pair_means(hits, j[sel] - 1, i[sel] - 1, 1.0 / (pj[sel] * pi[sel]))
        ex[k] = per.mean() - 1.0
        se[k] = per.std(ddof=1) / math.sqrt(t)
    exponent, used = fit_decay_exponent(ugaps, ex, se, fit_min_gap)

    n_conc = int(np.count_nonzero(powered))
    n_pass = int(np.count_nonzero(status == "pass"))
    return {
        "check": "pairwise",
        "certificate": cert.name,
        "trajectories": int(t),
        "pairs_tested": int(len(pairs)),
        "pairs_conclusive": n_conc,
        "pairs_passed": n_pass,
        "pairs_violated": int(np.count_nonzero(status == "violation")),
        "pass_fraction": n_pass / n_conc if n_conc else float("nan"),
        "z": z,
        "implied_c_scale": _finite_or_none(implied_c),
        "implied_C": _finite_or_none(implied_C),
        "gaps": ugaps.tolist(),
        "excess": ex.tolist(),
        "excess_se": se.tolist(),
        "decay_exponent": exponent,
        "decay_fit_points": used,
        "status": status.tolist(),
    }


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


# --------------------------------------------------------------------------
# deviation reports


@dataclass
class DeviationReport:
    n: np.ndarray
    S: np.ndarray
    E: np.ndarray
    envelope: np.ndarray
    ratio: np.ndarray = field(init=False)
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.int64)
        self.S = np.asarray(self.S)
        self.E = np.asarray(self.E, dtype=float)
        self.envelope = np.asarray(self.envelope, dtype=float)
        if not (self.n.shape == self.S.shape == self.E.shape == self.envelope.shape):
            raise ValueError("series must have equal lengths")
        with np.errstate(divide="ignore", invalid="ignore"):
            self.ratio = np.where(self.E > 0, self.S / self.E, np.nan)
            self.normalized = (self.S - self.E) / self.envelope

    def tail_max(self, window: int | None = None) -> float:
        """Largest ``|normalized deviation|`` over the last ``window`` entries."""
        w = len(self.n) if window is None else window
        tail = np.abs(self.normalized[-w:])
        tail = tail[np.isfinite(tail)]
        return float(tail.max()) if tail.size else float("nan")

    def summary(self, window: int | None = None) -> dict:
        return {
            "last_n": int(self.n[-1]),
            "last_ratio": float(self.ratio[-1]),
            "max_abs_normalized_deviation_tail": self.tail_max(window),
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "S_n", "E_n", "ratio", "envelope", "normalized_deviation"])
            for row in zip(self.n, self.S, self.E, self.ratio, self.envelope, self.normalized):
                w.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])
        return path


def deviation_report(S, E, envelope, n=None) -> DeviationReport:
    S = np.asarray(S)
    if n is None:
        n = np.arange(1, S.size + 1)
    return DeviationReport(n=n, S=S, E=E, envelope=envelope)


def tail_maxima(window_max) -> np.ndarray:
    """Running maximum from the right: ``M_w = max_{v >= w} window_max_v`` (NaN ignored)."""
    w = np.asarray(window_max, dtype=float)
    filled = np.where(np.isfinite(w), w, -np.inf)
    out = np.maximum.accumulate(filled[::-1])[::-1]
    return np.where(np.isfinite(out), out, np.nan)


def as_jsonable(obj):
    """Recursively turn numpy scalars and arrays into plain Python values."""
    if isinstance(obj, dict):
        return {k: as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return as_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "__dataclass_fields__"):
        return as_jsonable(asdict(obj))
    return obj
