"""Compiled orbit loops.  Every kernel uses the same floating-point step."""

import numpy as np
from numba import config, njit, prange

# skip the TBB probe; older system TBB builds only produce a warning
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@njit(inline="always", cache=True)
def step(x, alpha):
    if x <= 0.5:
        return x * (1.0 + (2.0 * x) ** alpha)
    return 2.0 * x - 1.0


@njit(cache=True)
def orbit(x0, alpha, n):
    out = np.empty(n + 1)
    x = x0
    out[0] = x
    for k in range(1, n + 1):
        x = step(x, alpha)
        out[k] = x
    return out


@njit(cache=True)
def hits(x0, alpha, lo, hi):
    n = lo.shape[0]
    out = np.zeros(n, dtype=np.uint8)
    x = x0
    for k in range(n):
        x = step(x, alpha)
        if lo[k] < x and x <= hi[k]:
            out[k] = 1
    return out


@njit(parallel=True, cache=True)
def hit_matrix(x0s, alpha, lo, hi):
    t = x0s.shape[0]
    n = lo.shape[0]
    out = np.zeros((t, n), dtype=np.uint8)
    for i in prange(t):
        x = x0s[i]
        for k in range(n):
            x = step(x, alpha)
            if lo[k] < x and x <= hi[k]:
                out[i, k] = 1
    return out


@njit(parallel=True, cache=True)
def checkpoint_counts(x0s, alpha, lo, hi, expected, envelope, checkpoints):
    """Stream hit counts and reduce them to checkpoint summaries.

    Returns ``S`` sampled at each (1-based) checkpoint, and for the window
    ``(checkpoints[w-1], checkpoints[w]]`` the maximum of
    ``|S_n - E_n| / envelope_n`` over indices where the envelope is finite
    (NaN when the window has no such index).
    """
    t = x0s.shape[0]
    nck = checkpoints.shape[0]
    counts = np.zeros((t, nck), dtype=np.int64)
    winmax = np.full((t, nck), np.nan)
    for i in prange(t):
        x = x0s[i]
        s = 0
        w = 0
        best = -1.0
        n_total = checkpoints[nck - 1]
        for k in range(n_total):
            x = step(x, alpha)
            if lo[k] < x and x <= hi[k]:
                s += 1
            env = envelope[k]
            if env == env:
                dev = abs(s - expected[k]) / env
                if dev > best:
                    best = dev
            if k + 1 == checkpoints[w]:
                counts[i, w] = s
                if best >= 0.0:
                    winmax[i, w] = best
                best = -1.0
                w += 1
    return counts, winmax


@njit(parallel=True, cache=True)
def advance(x0s, alpha, n):
    out = np.empty_like(x0s)
    for i in prange(x0s.shape[0]):
        x = x0s[i]
        for _ in range(n):
            x = step(x, alpha)
        out[i] = x
    return out
