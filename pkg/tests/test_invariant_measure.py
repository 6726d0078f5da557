import csv

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from sbclab.invariant_measure import (
    StationaryNotConverged,
    UlamDiscretization,
    build_ulam,
    compute_density,
    geometric_edges,
    invariance_residual,
    measure_bounds,
    measure_interval,
    random_intervals,
    sample_mu,
    stationary_density,
    ulam_from_edges,
    uniform_edges,
    write_density_csv,
)
from sbclab.map_core import Interval, MapParams, apply

ALPHAS = (0.25, 0.5, 0.75)

# mu((1/2, 1]) at alpha = 0.5, m = 2^12 geometric.  The m = 2^14 value
# 0.364685 serves as the refinement oracle.
MU_RIGHT_HALF_4096 = 0.36493779257603687
MU_RIGHT_HALF_16384 = 0.36468497514210263


def quadrature_row(params, edges, i, samples=200_000):
    """Midpoint-rule estimate of row ``i`` of the Ulam matrix."""
    lo, hi = edges[i], edges[i + 1]
    x = lo + (np.arange(samples) + 0.5) / samples * (hi - lo)
    y = apply(params, x)
    cols = np.searchsorted(edges, y, side="left") - 1
    return np.bincount(cols, minlength=edges.size - 1) / samples


class TestGrids:
    def test_uniform(self):
        e = uniform_edges(8)
        assert e[0] == 0 and e[-1] == 1 and 0.5 in e
        with pytest.raises(ValueError):
            uniform_edges(7)

    def test_geometric(self):
        e = geometric_edges(4096)
        assert e.size == 4097
        assert e[0] == 0.0 and e[1] == 1e-30 and e[-1] == 1.0
        assert 0.5 in e
        assert np.all(np.diff(e) > 0)
        with pytest.raises(ValueError):
            geometric_edges(8)


class TestUlamMatrix:
    def test_two_bins_exact(self):
        U = ulam_from_edges(MapParams(0.5), uniform_edges(2))
        rows = np.asarray(U.matrix.sum(axis=1)).ravel()
        assert np.array_equal(rows, [1.0, 1.0])
        # the right half maps onto (0, 1]: half its length lands back in (1/2, 1]
        assert U.matrix[1, 1] == pytest.approx(0.5, abs=1e-15)

    def test_entry_three_quarters(self):
        U = ulam_from_edges(MapParams(0.5), uniform_edges(4))
        assert U.matrix[3, 2] + U.matrix[3, 3] == pytest.approx(1.0, abs=1e-15)
        assert U.matrix[3, 0] + U.matrix[3, 1] == 0.0

    @pytest.mark.parametrize("grid", ["uniform", "geometric"])
    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_stochastic(self, alpha, grid):
        U = build_ulam(MapParams(alpha), 2**10, grid)
        rows = np.asarray(U.matrix.sum(axis=1)).ravel()
        assert np.max(np.abs(rows - 1.0)) <= 1e-12
        assert U.matrix.data.min() >= 0.0

    def test_sparsity(self):
        U = build_ulam(MapParams(0.5), 2**12, "uniform")
        assert np.diff(U.matrix.indptr).max() <= 6
        G = build_ulam(MapParams(0.5), 2**12, "geometric")
        nnz = np.diff(G.matrix.indptr)
        # only the bin just right of 1/2 covers the whole geometric region
        wide = np.flatnonzero(nnz > 6)
        assert wide.tolist() == [int(np.searchsorted(G.edges, 0.5))]

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_against_quadrature(self, alpha):
        p = MapParams(alpha)
        U = build_ulam(p, 64, "uniform")
        dense = U.matrix.toarray()
        for i in (0, 5, 17, 31, 32, 40, 63):
            assert np.max(np.abs(dense[i] - quadrature_row(p, U.edges, i))) <= 1e-4


def doubling_surrogate(m):
    """Ulam matrix of x -> 2x mod 1 on a uniform grid."""
    rows = np.repeat(np.arange(m), 2)
    cols = np.concatenate([[(2 * i) % m, (2 * i + 1) % m] for i in range(m)])
    mat = sp.csr_matrix((np.full(2 * m, 0.5), (rows, cols)), shape=(m, m))
    return UlamDiscretization(edges=uniform_edges(m), matrix=mat)


class TestStationary:
    def test_doubling_map_uniform(self):
        D = stationary_density(doubling_surrogate(64), method="power")
        assert np.allclose(D.values, 1.0, atol=1e-12)

    def test_doubling_map_induced(self):
        D = stationary_density(doubling_surrogate(64))
        assert np.allclose(D.values, 1.0, atol=1e-12)

    def test_induced_needs_triangular_block(self):
        # bin (1/4, 1/2] sends mass down to (0, 1/4]
        mat = sp.csr_matrix(np.array([[0, 0, 1, 0], [1, 0, 0, 0], [0, 0.5, 0, 0.5], [0, 0, 0.5, 0.5]]))
        with pytest.raises(ValueError):
            stationary_density(UlamDiscretization(edges=uniform_edges(4), matrix=mat))
        with pytest.raises(ValueError):
            build_ulam(MapParams(0.5), 8)

    def test_shape_and_normalization(self, density_half):
        D = density_half
        assert D.values[0] > D.values[-1]
        assert np.all(D.values >= 0)
        assert abs(np.sum(D.values * D.widths) - 1.0) <= 1e-10
        assert D.cdf[0] == 0.0 and D.cdf[-1] == 1.0
        assert D.residual <= 1e-10

    def test_bounded_away_from_zero(self, density_half):
        D = density_half
        away = D.edges[:-1] >= 0.1
        assert D.values[away].min() > 0.1
        assert D.values[away].max() < 10.0

    def test_power_method_agrees(self):
        p = MapParams(0.25)
        U = build_ulam(p, 256, "uniform")
        a = stationary_density(U, method="power", tol=1e-13)
        b = stationary_density(U)
        assert a.residual <= 1e-13
        assert np.max(np.abs(a.cdf - b.cdf)) <= 1e-9

    def test_not_converged(self):
        U = build_ulam(MapParams(0.5), 256, "uniform")
        with pytest.raises(StationaryNotConverged) as info:
            stationary_density(U, method="power", max_iter=2)
        assert info.value.iterations == 2
        assert info.value.residual > 0

    def test_bad_arguments(self):
        U = build_ulam(MapParams(0.5), 64, "uniform")
        with pytest.raises(ValueError):
            stationary_density(U, tol=0.0)
        with pytest.raises(ValueError):
            stationary_density(U, method="lu")


class TestMeasure:
    def test_full_space(self, density_half):
        assert measure_interval(density_half, Interval(0.0, 1.0)) == pytest.approx(1.0, abs=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3, unique=True))
    def test_additive(self, density_half, pts):
        a, b, c = sorted(pts)
        whole = measure_interval(density_half, Interval(a, c))
        parts = measure_interval(density_half, Interval(a, b)) + measure_interval(density_half, Interval(b, c))
        assert whole == pytest.approx(parts, abs=1e-15)

    def test_regression_right_half(self, density_half):
        mu = measure_interval(density_half, Interval(0.5, 1.0))
        assert mu == pytest.approx(MU_RIGHT_HALF_4096, abs=1e-12)
        assert abs(mu - MU_RIGHT_HALF_16384) <= 1e-3

    def test_refinement_right_half(self):
        p = MapParams(0.5)
        a = measure_bounds(compute_density(p, 2**10), 0.5, 1.0)
        b = measure_bounds(compute_density(p, 2**11), 0.5, 1.0)
        assert abs(a - b) < 1e-3

    def test_refinement_trend(self):
        p = MapParams(0.5)
        mus = [compute_density(p, m) for m in (2**9, 2**10, 2**11)]
        probes = random_intervals(50, seed=3)
        lo = np.array([b.lo for b in probes])
        hi = np.array([b.hi for b in probes])
        v = [measure_bounds(D, lo, hi) for D in mus]
        shrinking = np.abs(v[2] - v[1]) <= np.abs(v[1] - v[0])
        assert shrinking.mean() > 0.5

    def test_vectorized_bounds(self, density_half):
        lo = np.array([0.0, 0.2, 0.5])
        hi = np.array([0.1, 0.7, 1.0])
        got = measure_bounds(density_half, lo, hi)
        for g, a, b in zip(got, lo, hi):
            assert g == measure_interval(density_half, Interval(a, b))


class TestInvariance:
    def test_full_interval_probe(self, density_half):
        # the probe set is seeded, so the residual is reproducible
        r1 = invariance_residual(density_half, MapParams(0.5))
        r2 = invariance_residual(density_half, MapParams(0.5))
        assert r1 == r2

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_residual_small(self, alpha):
        p = MapParams(alpha)
        assert invariance_residual(compute_density(p, 2**12), p, probes=100) <= 1e-3

    def test_residual_decreases(self):
        p = MapParams(0.5)
        r = [invariance_residual(compute_density(p, m), p) for m in (2**8, 2**10, 2**12)]
        assert r[0] > r[1] > r[2]

    def test_probes(self, density_half):
        with pytest.raises(ValueError):
            invariance_residual(density_half, MapParams(0.5), probes=0)


class TestSampling:
    def test_binomial_ci(self, density_half):
        n = 10**5
        x = sample_mu(density_half, 11, n)
        assert np.all((x > 0) & (x <= 1))
        p = measure_bounds(density_half, 0.5, 1.0)
        freq = np.mean(x > 0.5)
        assert abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n)

    def test_interval_frequencies(self, density_half):
        n = 10**5
        x = sample_mu(density_half, 12, n)
        for b in random_intervals(10, seed=5):
            p = measure_interval(density_half, b)
            freq = np.mean((x > b.lo) & (x <= b.hi))
            assert abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n) + 1e-12

    def test_burn_in(self, density_half):
        n = 20_000
        x = sample_mu(density_half, 13, n, mode="burn_in", burn_in=1000)
        assert np.all((x > 0) & (x <= 1))
        p = measure_bounds(density_half, 0.5, 1.0)
        # Lebesgue-started orbits relax polynomially; allow a wider margin
        assert abs(np.mean(x > 0.5) - p) <= 5 * np.sqrt(p * (1 - p) / n)

    def test_deterministic(self, density_half):
        a = sample_mu(density_half, 99, 1000)
        b = sample_mu(density_half, 99, 1000)
        c = sample_mu(density_half, 100, 1000)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_bad_mode(self, density_half):
        with pytest.raises(ValueError):
            sample_mu(density_half, 1, 10, mode="mcmc")
        with pytest.raises(ValueError):
            sample_mu(density_half, 1, 0)


def test_density_csv(tmp_path, density_half):
    path = write_density_csv(density_half, tmp_path / "density.csv")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin_lo", "bin_hi", "density"]
    assert len(rows) == density_half.values.size + 1
    assert float(rows[1][0]) == 0.0 and float(rows[-1][1]) == 1.0
    assert float(rows[-1][2]) == density_half.values[-1]
    write_density_csv(density_half, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()
