"""Exact point-in-square counting and space-filling orders."""

from __future__ import annotations

import numpy as np


def hilbert_index(ix, iy, order):
    """Hilbert curve index of integer cells on a ``2**order`` grid (vectorized)."""
    x = np.asarray(ix, dtype=np.int64).copy()
    y = np.asarray(iy, dtype=np.int64).copy()
    d = np.zeros_like(x)
    s = 1 << (order - 1)
    while s > 0:
        rx = (x & s) > 0
        ry = (y & s) > 0
        d += s * s * ((3 * rx) ^ ry)
        # rotate quadrant
        flip = ~ry
        swap_x = np.where(flip & rx, s - 1 - x, x)
        swap_y = np.where(flip & rx, s - 1 - y, y)
        x = np.where(flip, swap_y, swap_x)
        y = np.where(flip, swap_x, swap_y)
        s >>= 1
    return d


def hilbert_order(pos, lo, hi, order=16):
    """Permutation sorting 2D points along a Hilbert curve over the box ``[lo, hi]``."""
    pos = np.asarray(pos, dtype=float)
    span = max(float(np.max(np.asarray(hi) - np.asarray(lo))), 1e-300)
    n = 1 << order
    q = np.clip(((pos - lo) / span * n).astype(np.int64), 0, n - 1)
    return np.argsort(hilbert_index(q[:, 0], q[:, 1], order), kind="stable")


def count_in_rects(pos, rects, chunk=2_000_000):
    """Number of points in each half-open rectangle ``[x0, x1) x [y0, y1)``."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    rects = np.asarray(rects, dtype=float).reshape(-1, 4)
    m, k = len(pos), len(rects)
    out = np.zeros(k, dtype=np.int64)
    if m == 0 or k == 0:
        return out
    if m * k <= chunk * 4:
        step = max(1, chunk // m)
        px, py = pos[:, 0], pos[:, 1]
        for s in range(0, k, step):
            r = rects[s : s + step]
            inside = (
                (px[None, :] >= r[:, 0:1])
                & (px[None, :] < r[:, 2:3])
                & (py[None, :] >= r[:, 1:2])
                & (py[None, :] < r[:, 3:4])
            )
            out[s : s + step] = inside.sum(axis=1)
        return out
    order = np.argsort(pos[:, 0], kind="stable")
    xs, ys = pos[order, 0], pos[order, 1]
    lo = np.searchsorted(xs, rects[:, 0], side="left")
    hi = np.searchsorted(xs, rects[:, 2], side="left")
    for i in range(k):
        if hi[i] > lo[i]:
            y = ys[lo[i] : hi[i]]
            out[i] = np.count_nonzero((y >= rects[i, 1]) & (y < rects[i, 3]))
    return out


def summed_area(grid):
    """Zero-padded 2D prefix sums: ``S[i, j] = grid[:i, :j].sum()``."""
    g = np.asarray(grid)
    S = np.zeros((g.shape[0] + 1, g.shape[1] + 1), dtype=np.result_type(g.dtype, np.int64))
    np.cumsum(np.cumsum(g, axis=0), axis=1, out=S[1:, 1:])
    return S


def sat_lookup(S, i0, j0, i1, j1):
    """Sum over index boxes ``[i0, i1) x [j0, j1)`` given a summed-area table."""
    return S[i1, j1] - S[i0, j1] - S[i1, j0] + S[i0, j0]


def grid_index_range(a, b, origin, h, r):
    """Indices of grid centers ``origin + (i + 0.5) h`` lying in ``[a, b)``, clipped to ``[0, r]``."""
    lo = np.ceil((np.asarray(a) - origin) / h - 0.5)
    hi = np.ceil((np.asarray(b) - origin) / h - 0.5)
    lo = np.clip(lo, 0, r).astype(np.int64)
    hi = np.clip(hi, 0, r).astype(np.int64)
    return lo, np.maximum(hi, lo)
