import csv
import json
import math

import numpy as np
import pytest

from sbclab.bc_engine import empirical_variance_check, power_growth
from sbclab.config import ExperimentConfig
from sbclab.experiments import (
    FLOAT_LANDING_FLOOR,
    PullbackViolation,
    density_for,
    density_report,
    dyadic_checkpoints,
    expected_series,
    run_correlation_study,
    run_counterexample,
    run_pullback,
    run_sbc,
    simulate_ensemble,
    start_points,
)
from sbclab.invariant_measure import measure_bounds
from sbclab.map_core import hit_matrix
from sbclab.schedule import IntervalSchedule, ScheduleError

SMALL = dict(ulam_bins=4096, trajectories=40, length=20_000, seed=3)


def test_dyadic_checkpoints():
    assert dyadic_checkpoints(5000).tolist() == [1024, 2048, 4096, 5000]
    assert dyadic_checkpoints(4096).tolist() == [1024, 2048, 4096]
    assert dyadic_checkpoints(10).tolist() == [10]


def test_expected_series_linear():
    cfg = ExperimentConfig(**SMALL)
    D = density_for(cfg)
    p, E = expected_series(D, cfg.make_schedule(), 1000)
    mu = measure_bounds(D, 0.5, 0.6)
    assert np.all(p == mu)
    assert E[-1] == pytest.approx(1000 * mu, rel=1e-14)
    assert np.allclose(np.diff(E), mu)


class TestSbc:
    def test_degenerate_full_interval(self):
        cfg = ExperimentConfig(interval="0:1", **SMALL)
        with pytest.raises(ScheduleError):
            run_sbc(cfg)
        rep = run_sbc(cfg, check_separation=False)
        for t in rep.trajectories:
            assert np.all(t.ratio == 1.0)
            assert np.all(t.S == t.n)

    def test_kim_rejected(self):
        with pytest.raises(ScheduleError):
            run_sbc(ExperimentConfig(schedule="kim", alpha=0.75, **SMALL))

    def test_bigger_eps_looser_envelope(self):
        a = run_sbc(ExperimentConfig(eps=0.1, **SMALL))
        b = run_sbc(ExperimentConfig(eps=1.0, **SMALL))
        for ta, tb in zip(a.trajectories, b.trajectories):
            ok = np.isfinite(ta.normalized)
            assert np.all(ta.S == tb.S)
            assert np.all(np.abs(tb.normalized[ok]) <= np.abs(ta.normalized[ok]))

    def test_report_contents(self, tmp_path):
        rep = run_sbc(ExperimentConfig(**SMALL))
        s = rep.summary
        assert s["experiment"] == "sbc" and s["config"]["seed"] == 3
        assert s["checkpoints"] == dyadic_checkpoints(20_000).tolist()
        assert "wall_time" not in json.dumps(s)
        assert {"ratio_within_tolerance", "envelope_dominates", "passed"} <= set(s["verdicts"])
        # aggregates are re-derivable from the per-trajectory data
        last = np.array([t.ratio[-1] for t in rep.trajectories])
        assert s["aggregates"][-1]["ratio"]["q50"] == pytest.approx(np.quantile(last, 0.5))
        out = rep.write(tmp_path / "run")
        assert (out / "report.json").exists() and (out / "density.csv").exists()
        assert len(list(out.glob("trajectory_*.csv"))) == 40
        rows = list(csv.reader((out / "trajectory_0.csv").open()))
        assert rows[0] == ["n", "S_n", "E_n", "ratio", "envelope", "normalized_deviation"]
        assert len(rows) == len(s["checkpoints"]) + 1

    def test_listed_schedule(self):
        cfg = ExperimentConfig(schedule="listed", intervals="0.5:0.6,0.6:0.9", **SMALL)
        rep = run_sbc(cfg)
        assert rep.summary["schedule"]["kind"] == "listed"
        assert abs(rep.summary["verdicts"]["median_abs_ratio_minus_1_final"]) < 0.1

    def test_burn_in_sampling(self):
        cfg = ExperimentConfig(sampling="burn_in", burn_in=200, **SMALL)
        rep = run_sbc(cfg)
        assert rep.summary["verdicts"]["median_abs_ratio_minus_1_final"] < 0.1


def test_ensemble_mean_matches_mu():
    cfg = ExperimentConfig(alpha=0.5, interval="0.5:0.75", trajectories=20_000, ulam_bins=4096, seed=5)
    D = density_for(cfg)
    sched = cfg.make_schedule()
    x0 = start_points(cfg, D)
    hits = hit_matrix(cfg.params, x0, sched, 200)
    p = measure_bounds(D, 0.5, 0.75)
    se = math.sqrt(p * (1 - p) / hits.shape[0])
    within = np.abs(hits.mean(axis=0) - p) <= 4 * se
    assert within.mean() >= 0.95


def test_variance_check_on_map():
    cfg = ExperimentConfig(alpha=0.5, interval="0.5:0.75", trajectories=2000, ulam_bins=4096, seed=6)
    D = density_for(cfg)
    x0 = start_points(cfg, D)
    hits = hit_matrix(cfg.params, x0, cfg.make_schedule(), 2000)
    p = np.full(2000, measure_bounds(D, 0.5, 0.75))
    pairs = [(n, m) for n in (0, 100, 500) for m in (1000, 2000)]
    res = empirical_variance_check(hits, p, pairs, power_growth(1.5))
    assert res["consistent"]


class TestCounterexample:
    def test_small_run(self):
        cfg = ExperimentConfig(alpha=0.75, schedule="kim", **SMALL)
        rep = run_counterexample(cfg)
        v = rep.summary["verdicts"]
        assert rep.summary["schedule"]["exponent"] == pytest.approx(-4.0)
        assert v["E_diverging"] and v["E_N"] > v["E_half_N"]
        assert v["ratio_not_converging"]
        ff = rep.summary["float_floor"]
        assert ff["landing_floor"] == FLOAT_LANDING_FLOOR
        assert ff["first_unreachable_index"] == 8193

    def test_E_grows(self):
        cfg = ExperimentConfig(alpha=0.75, schedule="kim", ulam_bins=4096)
        D = density_for(cfg)
        _, E = expected_series(D, cfg.make_schedule(), 2**16)
        for n in (2**10, 2**12, 2**14):
            assert E[2 * n - 1] > E[n - 1]

    def test_forces_kim(self):
        rep = run_counterexample(ExperimentConfig(alpha=0.75, **SMALL))
        assert rep.summary["schedule"]["kind"] == "kim"


class TestPullback:
    def test_right_half(self):
        cfg = ExperimentConfig(interval="0.5:1", trajectories=10, length=1000, ulam_bins=4096)
        res = run_pullback(cfg)
        assert res["violations"] == 0 and res["passed"]
        assert res["right_preimage"] == ["0.75:1.0"]
        assert res["max_abs_S1_minus_S_next"] <= 1

    def test_full_space(self):
        cfg = ExperimentConfig(interval="0:1", trajectories=10, length=1000, ulam_bins=4096)
        res = run_pullback(cfg)
        assert res["violations"] == 0
        assert res["max_abs_S1_minus_S_next"] <= 1

    @pytest.mark.parametrize("seed", range(5))
    def test_random_intervals(self, seed):
        lo, hi = np.sort(np.random.default_rng(seed).uniform(0.1, 1.0, 2))
        cfg = ExperimentConfig(interval=f"{float(lo)!r}:{float(hi)!r}", trajectories=10, length=1000, ulam_bins=4096, seed=seed)
        res = run_pullback(cfg)
        assert res["passed"]

    def test_listed(self):
        cfg = ExperimentConfig(schedule="listed", intervals="0.2:0.3,0.6:0.9", trajectories=5, length=500, ulam_bins=4096)
        res = run_pullback(cfg)
        assert res["violations"] == 0 and res["max_abs_S1_minus_S_next"] is None

    def test_violation_raises(self, monkeypatch):
        import sbclab.experiments as ex

        real = ex._member
        monkeypatch.setattr(ex, "_member", lambda x, lo, hi: real(x, lo, hi * 0.999))
        cfg = ExperimentConfig(interval="0.5:0.6", trajectories=3, length=2000, ulam_bins=4096)
        with pytest.raises(PullbackViolation):
            run_pullback(cfg)
        assert not run_pullback(cfg, strict=False)["passed"]


class TestCorrelations:
    def test_requires_right_interval(self):
        with pytest.raises(ScheduleError):
            run_correlation_study(ExperimentConfig(interval="0.2:0.6", length=128))
        with pytest.raises(ScheduleError):
            run_correlation_study(ExperimentConfig(interval="0.5:0.75", length=32, gaps="1:64"))

    def test_exponent_ordering_and_null(self):
        base = dict(interval="0.5:0.75", trajectories=100_000, length=128, gaps="1:64", ulam_bins=4096)
        fast = run_correlation_study(ExperimentConfig(alpha=0.5, **base))
        slow = run_correlation_study(ExperimentConfig(alpha=0.75, **base))
        # a larger exponent means faster decay
        assert fast["decay_exponent"] > slow["decay_exponent"]
        assert abs(slow["decay_exponent"] - 4.0 / 3.0) <= 0.5
        assert fast["null"]["consistent_with_zero"] and slow["null"]["consistent_with_zero"]
        assert fast["implied_C1_fit"] > 0

    def test_underpowered_is_inconclusive(self):
        cfg = ExperimentConfig(interval="0.5:0.75", trajectories=200, length=128, gaps="1:64", ulam_bins=4096)
        res = run_correlation_study(cfg)
        assert res["inconclusive"] and not res["passed"]


def test_density_report():
    D, meta = density_report(ExperimentConfig(alpha=0.5, ulam_bins=4096))
    assert meta["passed"] and meta["invariance_residual"] <= 1e-3
    assert meta["mu_right_half"] == pytest.approx(0.36493779257603687, abs=1e-12)
    assert meta["mass_below_stagnation"] < 1e-12


def test_simulation_deterministic():
    cfg = ExperimentConfig(**SMALL)
    sched = cfg.make_schedule()
    a = simulate_ensemble(cfg, sched)
    b = simulate_ensemble(cfg, sched)
    assert np.array_equal(a["S"], b["S"])
    assert np.array_equal(a["window_max"], b["window_max"], equal_nan=True)
    c = simulate_ensemble(cfg.replace(seed=4), sched)
    assert not np.array_equal(a["S"], c["S"])
