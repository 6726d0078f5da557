"""Ulam discretization of the transfer operator of T_alpha.

The matrix entry ``(i, j)`` is ``leb(I_i & T^{-1} I_j) / leb(I_i)``, computed
from exact branch preimages of the bin edges.  Its stationary row vector
gives the bin masses of a piecewise-constant approximation of the
absolutely continuous invariant probability measure.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from sbclab import _kernels
from sbclab.map_core import BRANCH_CUT, ConvergenceError, Interval, MapParams, invert_left

log = logging.getLogger(__name__)

GRIDS = ("geometric", "uniform")
DEFAULT_X_MIN = 1e-30


class StationaryNotConverged(ConvergenceError):
    def __init__(self, iterations, residual):
        super().__init__(f"power iteration stopped after {iterations} steps, residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class UlamDiscretization:
    edges: np.ndarray
    matrix: sp.csr_matrix
    params: MapParams | None = None
    grid: str = "custom"

    @property
    def bin_count(self) -> int:
        return self.edges.size - 1


@dataclass(frozen=True)
class DensityEstimate:
    """Piecewise-constant density ``values`` on the bins given by ``edges``.

    ``cdf`` holds the cumulative mass at each edge; ``cdf[0] == 0`` and
    ``cdf[-1] == 1`` exactly.
    """

    edges: np.ndarray
    values: np.ndarray
    cdf: np.ndarray
    residual: float
    iterations: int
    params: MapParams | None = None
    grid: str = "custom"

    @property
    def masses(self) -> np.ndarray:
        return np.diff(self.cdf)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


def uniform_edges(m: int) -> np.ndarray:
    if m < 2 or m % 2:
        raise ValueError("uniform grid needs an even bin count so that 1/2 is an edge")
    return np.arange(m + 1) / m


def geometric_edges(m: int, x_min: float = DEFAULT_X_MIN) -> np.ndarray:
    """Uniform bins on (1/u, 1] plus geometrically shrinking bins toward 0.

    A quarter of the bins (rounded so that 1/2 stays an edge) resolve
    ``(0, 1/u]`` geometrically down to ``x_min``; the first bin is ``(0, x_min]``.
    """
    if m < 16:
        raise ValueError("need at least 16 bins")
    n_geo = m // 4
    n_uni = m - n_geo
    if n_uni % 2:
        n_uni -= 1
        n_geo += 1
    first = 1.0 / n_uni
    if not 0.0 < x_min < first:
        raise ValueError(f"x_min must lie in (0, {first})")
    geo = np.geomspace(x_min, first, n_geo + 1)
    geo[-1] = first
    uni = np.arange(2, n_uni + 1) / n_uni
    return np.concatenate(([0.0], geo, uni))


def _right_entries(edges):
    """COO pieces for the right branch ``x -> 2x - 1`` on (1/2, 1].

    Positions are measured from 1/2, where the cut of edge ``e_j`` sits
    exactly at ``e_j / 2``; ``(e_j + 1) / 2`` would round tiny edges away.
    Every segment between consecutive merged points lies inside one source
    bin and one target bin.
    """
    cuts = 0.5 * edges
    inside = edges[edges >= BRANCH_CUT] - BRANCH_CUT
    pts = np.unique(np.concatenate((cuts, inside)))
    left, right = pts[:-1], pts[1:]
    rows = np.searchsorted(inside, left, side="right") - 1 + (edges.size - inside.size)
    cols = np.searchsorted(cuts, left, side="right") - 1
    return rows, cols, right - left


def _left_entries(params, edges):
    """COO pieces for the left branch on (0, 1/2].

    A cut ``c_j = invL(e_j)`` is stored as ``e_j - d_j`` with the deficit
    ``d_j = x_j (2 x_j)^alpha`` evaluated directly.  Near the neutral point
    ``d_j`` is far below one ulp of ``e_j``, so plain differences of cut
    positions would lose the escape rate of the smallest bins.
    """
    x = invert_left(params, edges, allow_zero=True)
    deficit = x * (2.0 * x) ** params.alpha
    n_left = int(np.searchsorted(edges, BRANCH_CUT)) + 1
    j = np.arange(edges.size)
    k = np.arange(n_left)
    # merged points: value, base edge index, offset from base, kind (0 cut, 1 edge)
    value = np.concatenate((edges - deficit, edges[:n_left]))
    base = np.concatenate((j, k))
    offset = np.concatenate((-deficit, np.zeros(n_left)))
    kind = np.concatenate((np.zeros(edges.size, int), np.ones(n_left, int)))
    order = np.lexsort((kind, value))
    base, offset, kind = base[order], offset[order], kind[order]
    length = (edges[base[1:]] - edges[base[:-1]]) + (offset[1:] - offset[:-1])
    rows = np.cumsum(kind)[:-1] - 1
    cols = np.cumsum(1 - kind)[:-1] - 1
    keep = (length > 0.0) & (rows >= 0) & (cols >= 0) & (rows < n_left - 1)
    return rows[keep], cols[keep], length[keep]


def build_ulam(params: MapParams, m: int, grid: str = "geometric", *, x_min: float = DEFAULT_X_MIN):
    """Assemble the Ulam matrix of T_alpha on ``m`` bins (no sampling noise)."""
    if m < 16:
        raise ValueError("need at least 16 bins")
    if grid == "geometric":
        edges = geometric_edges(m, x_min)
    elif grid == "uniform":
        edges = uniform_edges(m)
    else:
        raise ValueError(f"unknown grid {grid!r}; expected one of {GRIDS}")
    return ulam_from_edges(params, edges, grid=grid)


def ulam_from_edges(params: MapParams, edges, grid: str = "custom") -> UlamDiscretization:
    edges = np.asarray(edges, dtype=float)
    if edges[0] != 0.0 or edges[-1] != 1.0 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must increase strictly from 0 to 1")
    if not np.any(edges == BRANCH_CUT):
        raise ValueError("1/2 must be a bin edge")
    m = edges.size - 1
    r1, c1, v1 = _left_entries(params, edges)
    r2, c2, v2 = _right_entries(edges)
    rows = np.concatenate((r1, r2))
    cols = np.concatenate((c1, c2))
    vals = np.concatenate((v1, v2))
    lengths = np.bincount(rows, weights=vals, minlength=m)
    mat = sp.coo_matrix((vals / lengths[rows], (rows, cols)), shape=(m, m)).tocsr()
    mat.sum_duplicates()
    return UlamDiscretization(edges=edges, matrix=mat, params=params, grid=grid)


def _finish(U, masses, residual, iterations):
    masses = np.clip(masses, 0.0, None)
    cdf = np.concatenate(([0.0], np.cumsum(masses)))
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    values = np.diff(cdf) / np.diff(U.edges)
    return DensityEstimate(
        edges=U.edges,
        values=values,
        cdf=cdf,
        residual=float(residual),
        iterations=int(iterations),
        params=U.params,
        grid=U.grid,
    )


def _split_index(U):
    return int(np.searchsorted(U.edges, BRANCH_CUT))


def _induced_masses(U, tol, max_iter):
    """Stationary masses via the chain induced on the right-branch bins.

    Left-branch bins only move mass upward (``T(x) > x`` there), so the
    left block ``P_LL`` is upper triangular.  Each sweep pushes the right-bin
    masses ``q`` one first-return step:

        v = q P_RL (I - P_LL)^{-1},    q <- q P_RR + v P_LR

    The triangular solve only adds nonnegative terms, and its diagonal is
    assembled from off-diagonal escape rates, so bins near the neutral point
    keep full relative accuracy.  On convergence ``(v, q)`` are the masses.
    """
    P = U.matrix.tocsr()
    nl = _split_index(U)
    pll, plr = P[:nl, :nl], P[:nl, nl:]
    prl, prr = P[nl:, :nl], P[nl:, nl:]
    if sp.tril(pll, -1).nnz:
        raise ValueError("left block is not upper triangular; use method='power'")
    strict = sp.triu(pll, 1)
    escape = np.asarray(strict.sum(axis=1)).ravel() + np.asarray(plr.sum(axis=1)).ravel()
    lower = (sp.diags(escape) - strict.T).tocsr()
    prl_t, prr_t, plr_t = prl.T.tocsr(), prr.T.tocsr(), plr.T.tocsr()

    q = np.diff(U.edges)[nl:].copy()
    q /= q.sum()
    for it in range(1, max_iter + 1):
        v = spla.spsolve_triangular(lower, prl_t @ q, lower=True)
        nxt = prr_t @ q + plr_t @ v
        nxt /= nxt.sum()
        diff = float(np.abs(nxt - q).sum())
        q = nxt
        if diff <= tol:
            break
    else:
        raise StationaryNotConverged(max_iter, diff)
    v = spla.spsolve_triangular(lower, prl_t @ q, lower=True)
    masses = np.concatenate((v, q))
    return masses / masses.sum(), it


def stationary_density(
    U: UlamDiscretization,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    method: str = "induced",
) -> DensityEstimate:
    """Stationary density of the Ulam chain, by power iteration.

    ``method="power"`` iterates the full transport action from the uniform
    density until successive iterates differ by at most ``tol`` in l1.  Near
    the neutral point that chain relaxes extremely slowly, so the default
    ``method="induced"`` iterates the first-return chain on (1/2, 1] instead
    and then confirms the result with full transport steps under the same
    stopping rule.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    P = U.matrix.tocsr()
    PT = P.T.tocsr()
    if method == "power":
        masses = np.diff(U.edges).copy()
        sweeps = 0
    elif method == "induced":
        masses, sweeps = _induced_masses(U, min(tol, 1e-14), max_iter)
    else:
        raise ValueError("method must be 'induced' or 'power'")

    diff = np.inf
    for it in range(1, max_iter + 1):
        nxt = PT @ masses
        nxt /= nxt.sum()
        diff = float(np.abs(nxt - masses).sum())
        if method == "induced":
            # the full step only certifies; keep the accurately resolved masses
            break
        masses = nxt
        if diff <= tol:
            break
    if diff > tol:
        raise StationaryNotConverged(it + sweeps, diff)
    log.debug("stationary density: %d sweeps + %d steps, residual %.3e", sweeps, it, diff)
    return _finish(U, masses, diff, sweeps + it)


def measure_bounds(D: DensityEstimate, lo, hi):
    """Vectorized ``mu((lo, hi])`` for arrays of endpoints."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return np.interp(hi, D.edges, D.cdf) - np.interp(lo, D.edges, D.cdf)


def measure_interval(D: DensityEstimate, b: Interval) -> float:
    """Integral of the piecewise-constant density over ``b``."""
    return float(measure_bounds(D, b.lo, b.hi))


def random_intervals(n: int, seed: int = 0) -> list[Interval]:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        lo, hi = np.sort(rng.random(2))
        if hi > lo:
            out.append(Interval(lo, hi))
    return out


def invariance_residual(D: DensityEstimate, params: MapParams, probes: int = 100, seed: int = 0) -> float:
    """Largest ``|mu(T^{-1} b) - mu(b)|`` over ``probes`` seeded random intervals."""
    if probes < 1:
        raise ValueError("probes must be at least 1")
    worst = 0.0
    for b in random_intervals(probes, seed):
        lo_lo = invert_left(params, b.lo, allow_zero=True)
        lo_hi = invert_left(params, b.hi)
        pulled = measure_bounds(D, lo_lo, lo_hi) + measure_bounds(D, 0.5 * (b.lo + 1.0), 0.5 * (b.hi + 1.0))
        worst = max(worst, abs(float(pulled) - measure_interval(D, b)))
    return worst


def sample_mu(
    D: DensityEstimate,
    seed: int,
    n: int,
    mode: str = "inverse_cdf",
    *,
    burn_in: int = 1000,
) -> np.ndarray:
    """Draw ``n`` points in (0, 1] distributed according to ``D``.

    ``burn_in`` mode starts from Lebesgue-uniform points and pushes them
    forward ``burn_in`` times under the map; it needs ``D.params``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(n)  # (0, 1]
    if mode == "inverse_cdf":
        cdf, edges = D.cdf, D.edges
        idx = np.searchsorted(cdf, u, side="left") - 1
        idx = np.clip(idx, 0, edges.size - 2)
        frac = (u - cdf[idx]) / (cdf[idx + 1] - cdf[idx])
        x = edges[idx] + frac * (edges[idx + 1] - edges[idx])
        x = np.minimum(x, edges[idx + 1])
        return np.where(x > edges[idx], x, np.nextafter(edges[idx], 1.0))
    if mode == "burn_in":
        if D.params is None:
            raise ValueError("burn_in sampling needs the map parameters")
        return _kernels.advance(u, D.params.alpha, int(burn_in))
    raise ValueError("mode must be 'inverse_cdf' or 'burn_in'")


def write_density_csv(D: DensityEstimate, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "density"])
        for lo, hi, h in zip(D.edges[:-1], D.edges[1:], D.values):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(h))])
    return path


def compute_density(params: MapParams, m: int = 4096, grid: str = "geometric", **kw) -> DensityEstimate:
    """Convenience: build the Ulam matrix and solve for its stationary density."""
    return stationary_density(build_ulam(params, m, grid), **kw)
