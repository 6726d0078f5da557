"""End-to-end experiments: SBC runs, the Kim counterexample, pullbacks, correlations."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from sbclab import _kernels
from sbclab.bc_engine import (
    DeviationReport,
    as_jsonable,
    envelope_corollary1,
    gap_excess,
    gouezel_certificate,
    pairwise_correlation_check,
    tail_maxima,
    fit_decay_exponent,
)
from sbclab.config import ExperimentConfig
from sbclab.invariant_measure import (
    DensityEstimate,
    build_ulam,
    invariance_residual,
    measure_bounds,
    sample_mu,
    stationary_density,
    write_density_csv,
)
from sbclab.map_core import MapParams, stagnation_threshold
from sbclab.schedule import IntervalSchedule, ScheduleError

log = logging.getLogger(__name__)

# smallest positive value 2y - 1 can take for a double y in (1/2, 1]
FLOAT_LANDING_FLOOR = 2.0**-52
TREND_CHECKPOINTS = (2**14, 2**17, 2**20)
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class PullbackViolation(AssertionError):
    """The pointwise preimage identity failed: a branch or endpoint bug."""


@lru_cache(maxsize=16)
def _density(alpha: float, m: int, grid: str) -> DensityEstimate:
    return stationary_density(build_ulam(MapParams(alpha), m, grid))


def density_for(cfg: ExperimentConfig) -> DensityEstimate:
    return _density(cfg.alpha, cfg.ulam_bins, cfg.grid)


def start_points(cfg: ExperimentConfig, D: DensityEstimate) -> np.ndarray:
    return sample_mu(D, cfg.seed, cfg.trajectories, cfg.sampling, burn_in=cfg.burn_in)


def dyadic_checkpoints(N: int, first: int = 2**10) -> np.ndarray:
    """``2^10, 2^11, ... <= N`` plus ``N`` itself."""
    pts = []
    c = first
    while c < N:
        pts.append(c)
        c *= 2
    pts.append(N)
    return np.array(pts, dtype=np.int64)


def expected_series(D: DensityEstimate, schedule: IntervalSchedule, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-step ``mu(B_k)`` and ``E_n`` from the Ulam density."""
    lo, hi = schedule.bounds(N)
    p = measure_bounds(D, lo, hi)
    if schedule.kind == "fixed":
        # exact for p = 1 and free of summation drift otherwise
        E = p[0] * np.arange(1, N + 1, dtype=float)
    else:
        E = np.cumsum(p)
    return p, E


@dataclass
class ExperimentReport:
    """Everything one run emits; ``summary`` is written verbatim to report.json."""

    summary: dict
    trajectories: list = field(default_factory=list)
    density: DensityEstimate | None = None
    wall_time: float = 0.0

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(as_jsonable(self.summary), indent=2) + "\n")
        for i, rep in enumerate(self.trajectories):
            rep.write_csv(out / f"trajectory_{i}.csv")
        if self.density is not None:
            write_density_csv(self.density, out / "density.csv")
        # kept apart from report.json so that the report stays byte-reproducible
        (out / "timing.json").write_text(json.dumps({"wall_time_s": self.wall_time}) + "\n")
        return out


def _quantile_table(values: np.ndarray) -> dict:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return {f"q{int(q * 100):02d}": None for q in QUANTILES}
    qs = np.quantile(finite, QUANTILES)
    return {f"q{int(q * 100):02d}": float(v) for q, v in zip(QUANTILES, qs)}


def _density_meta(cfg: ExperimentConfig, D: DensityEstimate) -> dict:
    resid = invariance_residual(D, cfg.params, cfg.probes)
    return {
        "bins": int(D.edges.size - 1),
        "grid": D.grid,
        "stationary_residual": D.residual,
        "invariance_residual": resid,
        "invariance_ok": bool(resid <= cfg.residual_tol),
        # mu-samples below this point are float fixed points of the map
        "stagnation_threshold": stagnation_threshold(cfg.params),
        "mass_below_stagnation": float(measure_bounds(D, 0.0, stagnation_threshold(cfg.params))),
    }


def simulate_ensemble(cfg: ExperimentConfig, schedule: IntervalSchedule, D: DensityEstimate | None = None):
    """Stream every trajectory once and reduce to checkpoint summaries.

    Returns a dict with checkpoints, ``S`` (trajectories x checkpoints),
    ``E``/envelope at the checkpoints, per-window maxima of the normalized
    deviation (restricted to ``E_n > e^e``) and the per-step probabilities.
    """
    D = density_for(cfg) if D is None else D
    N = cfg.length
    ck = dyadic_checkpoints(N)
    p, E = expected_series(D, schedule, N)
    env = envelope_corollary1(E, cfg.envelope_gamma, cfg.eps)
    env_tail = np.where(E > math.e**math.e, env, np.nan)
    lo, hi = schedule.bounds(N)
    x0 = start_points(cfg, D)
    S, winmax = _kernels.checkpoint_counts(x0, cfg.alpha, lo, hi, E, env_tail, ck)
    return {
        "checkpoints": ck,
        "S": S,
        "E": E[ck - 1],
        "envelope": env[ck - 1],
        "window_max": winmax,
        "probs": p,
        "x0": x0,
        "density": D,
    }


def _ensemble_aggregates(sim) -> tuple[list, np.ndarray, np.ndarray]:
    ck, S, E, env = sim["checkpoints"], sim["S"], sim["E"], sim["envelope"]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(E > 0, S / E, np.nan)
        norm = (S - E) / env
    rows = []
    for w, n in enumerate(ck):
        r = ratio[:, w]
        q = _quantile_table(r)
        rows.append(
            {
                "n": int(n),
                "E_n": float(E[w]),
                "envelope": float(env[w]),
                "ratio": q,
                "ratio_iqr": None if q["q75"] is None else q["q75"] - q["q25"],
                "median_abs_ratio_minus_1": float(np.median(np.abs(r - 1.0))),
                "normalized_deviation": _quantile_table(norm[:, w]),
            }
        )
    return rows, ratio, norm


def _trajectory_reports(sim) -> list:
    ck, S, E, env = sim["checkpoints"], sim["S"], sim["E"], sim["envelope"]
    return [DeviationReport(n=ck, S=S[i], E=E, envelope=env) for i in range(S.shape[0])]


def _trend_indices(ck) -> list:
    N = int(ck[-1])
    idx = []
    for c in TREND_CHECKPOINTS:
        c = min(c, N)
        hit = np.flatnonzero(ck == c)
        if hit.size and int(hit[0]) not in idx:
            idx.append(int(hit[0]))
    return idx


def run_sbc(cfg: ExperimentConfig, *, check_separation: bool = True) -> ExperimentReport:
    """Simulate a separated schedule and test ``S_n / E_n -> 1`` and envelope domination."""
    t0 = time.perf_counter()
    schedule = cfg.make_schedule()
    if schedule.kind == "kim":
        raise ScheduleError("run_sbc needs a fixed or listed schedule")
    if check_separation:
        schedule.require_separated()
    D = density_for(cfg)
    sim = simulate_ensemble(cfg, schedule, D)
    rows, ratio, norm = _ensemble_aggregates(sim)
    ck, E = sim["checkpoints"], sim["E"]

    med = np.median(np.abs(ratio - 1.0), axis=0)
    trend_idx = _trend_indices(ck)
    trend = [float(med[i]) for i in trend_idx]
    trend_ok = all(b <= a for a, b in zip(trend, trend[1:]))

    tail_region = E > math.e**math.e
    dominated = bool(np.all(np.abs(norm[:, tail_region]) <= 1.0)) if tail_region.any() else None
    tails = np.array([tail_maxima(w) for w in sim["window_max"]])
    valid = np.isfinite(tails)
    nonincreasing = np.array(
        [np.all(np.diff(t[v]) <= 0.0) for t, v in zip(tails, valid)]
    )
    wm = sim["window_max"]
    first_w = np.argmax(np.isfinite(wm), axis=1)
    decayed = np.array(
        [np.isfinite(w[f]) and w[-1] < w[f] for w, f in zip(wm, first_w)]
    )
    window_mono = np.array([np.all(np.diff(w[np.isfinite(w)]) <= 0.0) for w in wm])

    dens = _density_meta(cfg, D)
    verdicts = {
        "median_abs_ratio_minus_1_final": float(med[-1]),
        "ratio_within_tolerance": bool(med[-1] <= cfg.ratio_tol),
        "trend_checkpoints": [int(ck[i]) for i in trend_idx],
        "trend_medians": trend,
        "ratio_trend_nonincreasing": bool(trend_ok),
        "envelope_dominates": dominated,
        "tail_max_nonincreasing_fraction": float(nonincreasing.mean()),
        "window_max_decayed_fraction": float(decayed.mean()),
        "window_max_nonincreasing_fraction": float(window_mono.mean()),
        "density_ok": dens["invariance_ok"],
    }
    verdicts["passed"] = bool(
        verdicts["ratio_within_tolerance"]
        and trend_ok
        and dominated is not False
        and verdicts["tail_max_nonincreasing_fraction"] >= 0.95
        and dens["invariance_ok"]
    )
    summary = {
        "experiment": "sbc",
        "config": cfg.to_dict(),
        "schedule": schedule.describe(),
        "density": dens,
        "mu_B_first": float(sim["probs"][0]),
        "checkpoints": ck.tolist(),
        "aggregates": rows,
        "trajectories": [
            dict(r.summary(), index=i, window_max=wm[i].tolist(), tail_max=tails[i].tolist())
            for i, r in enumerate(_trajectory_reports(sim))
        ],
        "verdicts": verdicts,
    }
    return ExperimentReport(summary, _trajectory_reports(sim), D, time.perf_counter() - t0)


def run_counterexample(cfg: ExperimentConfig) -> ExperimentReport:
    """Run the shrinking schedule ``(0, n^{1/(alpha-1)}]`` through the same pipeline."""
    t0 = time.perf_counter()
    cfg = cfg.replace(schedule="kim")
    schedule = cfg.make_schedule()
    D = density_for(cfg)
    sim = simulate_ensemble(cfg, schedule, D)
    rows, ratio, _ = _ensemble_aggregates(sim)
    ck, S, E = sim["checkpoints"], sim["S"], sim["E"]
    N = cfg.length

    iqr = np.array([r["ratio_iqr"] if r["ratio_iqr"] is not None else np.nan for r in rows])
    med = np.array([r["ratio"]["q50"] if r["ratio"]["q50"] is not None else np.nan for r in rows])
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = [float(v) for v in iqr / med]
    E_full = np.cumsum(sim["probs"])
    half = max(N // 2, 1)
    # past this index B_n lies below every value the double-precision orbit can land on
    floor_idx = int(np.searchsorted(-schedule.bounds(N)[1], -FLOAT_LANDING_FLOOR, side="right")) + 1
    reachable = floor_idx <= N
    dens = _density_meta(cfg, D)
    verdicts = {
        "E_N": float(E_full[-1]),
        "E_half_N": float(E_full[half - 1]),
        "E_diverging": bool(E_full[-1] > E_full[half - 1]),
        "ratio_iqr_first": float(iqr[0]),
        "ratio_iqr_final": float(iqr[-1]),
        "ratio_std_final": float(np.std(ratio[:, -1])),
        "relative_iqr_first": rel[0],
        "relative_iqr_final": rel[-1],
        "median_abs_ratio_minus_1_final": float(np.median(np.abs(ratio[:, -1] - 1.0))),
        "fraction_zero_hits": float(np.mean(S[:, -1] == 0)),
        "density_ok": dens["invariance_ok"],
    }
    # S_N / E_N drifts toward 0, so its spread is judged relative to its median
    verdicts["dispersion_not_shrinking"] = bool(rel[-1] >= 0.5 * rel[0])
    verdicts["ratio_not_converging"] = bool(verdicts["median_abs_ratio_minus_1_final"] > cfg.ratio_tol)
    verdicts["non_sbc_signature"] = bool(
        verdicts["E_diverging"] and verdicts["dispersion_not_shrinking"] and verdicts["ratio_not_converging"]
    )
    verdicts["passed"] = bool(verdicts["non_sbc_signature"] and dens["invariance_ok"])
    summary = {
        "experiment": "counterexample",
        "config": cfg.to_dict(),
        "schedule": schedule.describe(),
        "density": dens,
        "checkpoints": ck.tolist(),
        "aggregates": rows,
        "float_floor": {
            "landing_floor": FLOAT_LANDING_FLOOR,
            "first_unreachable_index": floor_idx if reachable else None,
            "E_beyond_floor": float(E_full[-1] - E_full[floor_idx - 2]) if reachable else 0.0,
        },
        "trajectories": [dict(r.summary(), index=i) for i, r in enumerate(_trajectory_reports(sim))],
        "verdicts": verdicts,
    }
    return ExperimentReport(summary, _trajectory_reports(sim), D, time.perf_counter() - t0)


def _member(x, lo, hi):
    return (lo < x) & (x <= hi)


def run_pullback(cfg: ExperimentConfig, *, strict: bool = True) -> dict:
    """Check ``1[T^k x in T^{-1} B_k] == 1[T^{k+1} x in B_k]`` step by step.

    For a fixed schedule also checks ``|S^1_n - S_{n+1}| <= 1``, where
    ``S^1`` counts visits to the pulled-back set.  With ``strict`` a single
    violation raises :class:`PullbackViolation`.
    """
    schedule = cfg.make_schedule()
    params = cfg.params
    left, right = schedule.pulled_back(params)
    D = density_for(cfg)
    x0 = start_points(cfg, D)
    N = cfg.length
    lo, hi = schedule.bounds(N + 1)
    llo, lhi = left.bounds(N)
    rlo, rhi = right.bounds(N)
    violations = 0
    worst_gap = 0
    for x in x0:
        orb = _kernels.orbit(float(x), params.alpha, N + 1)
        # pulled-back bits use x_k = T^k x0 for k = 1..N against T^{-1} B_k
        xs = orb[1 : N + 1]
        pulled = _member(xs, llo, lhi) | _member(xs, rlo, rhi)
        forward = _member(orb[2 : N + 2], lo[:N], hi[:N])
        violations += int(np.count_nonzero(pulled != forward))
        if schedule.kind == "fixed":
            s1 = np.cumsum(pulled)
            direct = _member(orb[1 : N + 2], lo, hi)
            s = np.cumsum(direct)
            worst_gap = max(worst_gap, int(np.max(np.abs(s1 - s[1:]))))
    result = {
        "experiment": "pullback",
        "config": cfg.to_dict(),
        "schedule": schedule.describe(),
        "left_preimage": [str(b) for b in left.intervals],
        "right_preimage": [str(b) for b in right.intervals],
        "steps_checked": int(N * len(x0)),
        "violations": violations,
        "count_bound_checked": schedule.kind == "fixed",
        "max_abs_S1_minus_S_next": worst_gap if schedule.kind == "fixed" else None,
    }
    result["passed"] = bool(violations == 0 and (schedule.kind != "fixed" or worst_gap <= 1))
    if strict and violations:
        raise PullbackViolation(f"{violations} preimage identity violations")
    return result


def _shuffled(hits, seed):
    """Permute every column independently across trajectories."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(hits)
    for k in range(hits.shape[1]):
        out[:, k] = hits[rng.permutation(hits.shape[0]), k]
    return out


def run_correlation_study(cfg: ExperimentConfig, gaps=None) -> dict:
    """Estimate pairwise dependence for a fixed interval inside (1/2, 1].

    The pooled excess ``P(A_j A_{j+g}) / mu(B)^2 - 1`` should decay like
    ``g^{1 - beta}``; the fitted slope plus one estimates ``beta = 1/alpha``.
    """
    schedule = cfg.make_schedule()
    if schedule.kind != "fixed" or schedule.intervals[0].lo < 0.5:
        raise ScheduleError("correlation study needs a fixed interval inside (1/2, 1]")
    gaps = cfg.gap_list() if gaps is None else sorted(set(int(g) for g in gaps))
    N = cfg.length
    if max(gaps) >= N:
        raise ScheduleError("largest gap must be shorter than the trajectory length")
    params = cfg.params
    D = density_for(cfg)
    x0 = start_points(cfg, D)
    lo, hi = schedule.bounds(N)
    hits = np.asfortranarray(_kernels.hit_matrix(x0, params.alpha, lo, hi))
    p = measure_bounds(D, lo, hi)

    pairs = [(j, j + g) for g in gaps for j in range(1, N - g + 1)]
    cert = gouezel_certificate(cfg.alpha, C1=cfg.c1, C=cfg.c_const)
    check = pairwise_correlation_check(hits, p, cert, pairs, fit_min_gap=cfg.fit_min_gap)
    check.pop("status")

    ex = np.asarray(check["excess"])
    se = np.asarray(check["excess_se"])
    g_arr = np.asarray(check["gaps"], dtype=float)
    beta = params.beta
    ok = (g_arr >= cfg.fit_min_gap) & (np.abs(ex) > 2 * se)
    c1_sup = float(np.max(np.abs(ex[ok]) * g_arr[ok] ** (beta - 1.0))) if ok.any() else None
    if ok.any():
        basis = g_arr[ok] ** (1.0 - beta)
        c1_fit = float(basis @ ex[ok] / (basis @ basis))
        c_resid = float(np.max(np.abs(ex[ok] - c1_fit * basis) * p[0] * g_arr[ok] ** beta))
    else:
        c1_fit = c_resid = None

    # the permutation keeps each column's frequency, so normalize by those
    null_hits = _shuffled(np.ascontiguousarray(hits), cfg.seed + 1)
    null_ex, null_se = gap_excess(null_hits, null_hits.mean(axis=0), gaps)
    null_z = np.abs(null_ex) / null_se
    null_slope, _ = fit_decay_exponent(gaps, null_ex, null_se, cfg.fit_min_gap)

    slope = check["decay_exponent"]
    result = {
        "experiment": "correlations",
        "config": cfg.to_dict(),
        "schedule": schedule.describe(),
        "mu_B": float(p[0]),
        "target_beta": beta,
        "excess_decay_exponent": slope,
        "decay_exponent": None if slope is None else 1.0 + slope,
        "implied_C1_sup": c1_sup,
        "implied_C1_fit": c1_fit,
        "implied_C": c_resid,
        "pairwise": check,
        "null": {
            "excess": null_ex.tolist(),
            "max_abs_z": float(null_z.max()),
            "fraction_within_3se": float(np.mean(null_z <= 3.0)),
            "fitted_exponent": null_slope,
            "consistent_with_zero": bool(np.mean(null_z <= 3.0) >= 0.95),
        },
    }
    # a pooled fit alone is not enough when no individual pair is resolvable
    result["inconclusive"] = slope is None or check["pairs_conclusive"] == 0
    result["passed"] = bool(not result["inconclusive"] and abs(result["decay_exponent"] - beta) <= 0.5)
    return result


def density_report(cfg: ExperimentConfig) -> tuple[DensityEstimate, dict]:
    D = density_for(cfg)
    meta = _density_meta(cfg, D)
    meta.update(
        {
            "experiment": "density",
            "config": cfg.to_dict(),
            "mu_right_half": float(measure_bounds(D, 0.5, 1.0)),
            "passed": meta["invariance_ok"],
        }
    )
    return D, meta
