"""Normalized kernels on the square support [-1, 1]^2 and exact volume queries.

All coordinates are in scaled units (kernel width 1). A rectangle is a tuple
``(x0, y0, x1, y1)``; batched rectangles are arrays of shape ``(m, 4)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize
from scipy.special import erf

from .motion import positions_at

KINDS = ("cone", "pyramid", "truncated-gaussian")
GAUSSIAN_STD = 0.5


def _gauss_1d(u, s=GAUSSIAN_STD):
    e0 = np.exp(-0.5 / s**2)
    return np.where(np.abs(u) < 1, np.exp(-0.5 * u**2 / s**2) - e0, 0.0)


def _gauss_cdf(x, s=GAUSSIAN_STD):
    # integral of _gauss_1d over [-1, x]
    x = np.clip(x, -1.0, 1.0)
    e0 = np.exp(-0.5 / s**2)
    k = s * np.sqrt(np.pi / 2)
    r = 1.0 / (s * np.sqrt(2))
    return k * (erf(x / (s * np.sqrt(2))) + erf(r)) - e0 * (x + 1.0)


def _pyramid_origin(x, y):
    """Signed volume of 1 - max(|u|, |v|) over the box between the origin and (x, y)."""
    a = np.minimum(np.abs(x), 1.0)
    b = np.minimum(np.abs(y), 1.0)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    p = lo * hi - lo**3 / 6.0 - lo * hi**2 / 2.0
    return np.sign(x) * np.sign(y) * p


def _cone_edge(px, py, qx, qy):
    """Signed integral of (1 - r)_+ over the triangle (origin, P, Q)."""
    ex, ey = qx - px, qy - py
    length = np.hypot(ex, ey)
    ok_len = length > 0
    L = np.where(ok_len, length, 1.0)
    ux, uy = ex / L, ey / L
    d = px * uy - py * ux
    ad = np.abs(d)
    live = ok_len & (ad > 1e-300)
    ad_s = np.where(live, ad, 1.0)
    tp = px * ux + py * uy
    tq = tp + length
    th_p = np.arctan2(tp, ad_s)
    th_q = np.arctan2(tq, ad_s)
    th_c = np.arccos(np.minimum(ad_s, 1.0))

    def prim(th):
        c = np.clip(th, -th_c, th_c)
        sec = 1.0 / np.cos(c)
        tan = np.tan(c)
        inside = ad_s**2 / 2 * tan - ad_s**3 / 6 * (sec * tan + np.log(sec + tan))
        return inside + (th - c) / 6.0

    val = np.sign(d) * (prim(th_q) - prim(th_p))
    return np.where(live, val, 0.0)


def _cone_rect(x0, y0, x1, y1):
    return (
        _cone_edge(x0, y0, x1, y0)
        + _cone_edge(x1, y0, x1, y1)
        + _cone_edge(x1, y1, x0, y1)
        + _cone_edge(x0, y1, x0, y0)
    )


@dataclass(frozen=True)
class KernelConstants:
    lipschitz: float
    peak: float


@dataclass(frozen=True)
class Kernel:
    """A normalized density bump supported on [-1, 1]^2.

    ``normalization`` is the factor making total volume 1; ``constants``
    carries the Lipschitz constant and peak value found by probing.
    """

    kind: str
    normalization: float = field(init=False)
    constants: KernelConstants = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind == "gaussian":
            object.__setattr__(self, "kind", "truncated-gaussian")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "pyramid":
            norm = 3.0 / 4.0
        elif self.kind == "cone":
            norm = 3.0 / np.pi
        else:
            norm = 1.0 / float(_gauss_cdf(1.0)) ** 2
        object.__setattr__(self, "normalization", norm)
        object.__setattr__(self, "constants", _probe_constants(self))

    @property
    def lipschitz(self):
        return self.constants.lipschitz

    @property
    def peak(self):
        return self.constants.peak

    def __call__(self, dx, dy):
        dx = np.asarray(dx, dtype=float)
        dy = np.asarray(dy, dtype=float)
        c = self.normalization
        if self.kind == "pyramid":
            m = np.maximum(np.abs(dx), np.abs(dy))
            return c * np.where(m < 1, 1.0 - m, 0.0)
        if self.kind == "cone":
            r = np.hypot(dx, dy)
            return c * np.where(r < 1, 1.0 - r, 0.0)
        return c * _gauss_1d(dx) * _gauss_1d(dy)

    def gradient(self, dx, dy):
        dx = np.asarray(dx, dtype=float)
        dy = np.asarray(dy, dtype=float)
        c = self.normalization
        if self.kind == "pyramid":
            inside = np.maximum(np.abs(dx), np.abs(dy)) < 1
            along_x = np.abs(dx) >= np.abs(dy)
            gx = np.where(inside & along_x, -c * np.sign(dx), 0.0)
            gy = np.where(inside & ~along_x, -c * np.sign(dy), 0.0)
            return gx, gy
        if self.kind == "cone":
            r = np.hypot(dx, dy)
            inside = (r < 1) & (r > 0)
            rs = np.where(inside, r, 1.0)
            return np.where(inside, -c * dx / rs, 0.0), np.where(inside, -c * dy / rs, 0.0)
        s2 = GAUSSIAN_STD**2
        inside = (np.abs(dx) < 1) & (np.abs(dy) < 1)
        ex = np.exp(-0.5 * dx**2 / s2)
        ey = np.exp(-0.5 * dy**2 / s2)
        gx = c * (-dx / s2) * ex * _gauss_1d(dy)
        gy = c * (-dy / s2) * ey * _gauss_1d(dx)
        return np.where(inside, gx, 0.0), np.where(inside, gy, 0.0)

    def rect_volume(self, x0, y0, x1, y1):
        """Exact volume over rectangles (vectorized); zero-area rectangles give 0."""
        x0, y0, x1, y1 = (np.asarray(a, dtype=float) for a in (x0, y0, x1, y1))
        lo_x, hi_x = np.clip(x0, -1, 1), np.clip(x1, -1, 1)
        lo_y, hi_y = np.clip(y0, -1, 1), np.clip(y1, -1, 1)
        empty = (hi_x <= lo_x) | (hi_y <= lo_y)
        if self.kind == "pyramid":
            v = (
                _pyramid_origin(hi_x, hi_y)
                - _pyramid_origin(lo_x, hi_y)
                - _pyramid_origin(hi_x, lo_y)
                + _pyramid_origin(lo_x, lo_y)
            )
        elif self.kind == "cone":
            v = _cone_rect(lo_x, lo_y, hi_x, hi_y)
        else:
            v = (_gauss_cdf(hi_x) - _gauss_cdf(lo_x)) * (_gauss_cdf(hi_y) - _gauss_cdf(lo_y))
        v = self.normalization * v
        return np.where(empty, 0.0, np.maximum(v, 0.0))

    def kinks(self):
        """Coordinates along one axis where the kernel is not smooth."""
        return (-1.0, 0.0, 1.0)


def _probe_constants(kernel):
    g = np.linspace(-1, 1, 801)
    X, Y = np.meshgrid(g, g, indexing="ij")
    gx, gy = kernel.gradient(X, Y)
    norm = np.hypot(gx, gy)
    i = np.unravel_index(np.argmax(norm), norm.shape)
    lam = float(norm[i])
    if kernel.kind == "truncated-gaussian":
        def neg(p):
            a, b = kernel.gradient(p[0], p[1])
            return -float(np.hypot(a, b))

        res = optimize.minimize(neg, x0=[X[i], Y[i]], method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
        lam = max(lam, -res.fun)
    peak = float(max(kernel(X, Y).max(), kernel(0.0, 0.0)))
    return KernelConstants(lipschitz=lam, peak=peak)


@lru_cache(maxsize=None)
def make_kernel(kind):
    return Kernel(kind)


def eval(kernel, dx, dy):  # noqa: A001 - mirrors the operation name
    return kernel(dx, dy)


def cell_volume(kernel, rect):
    x0, y0, x1, y1 = rect
    return float(kernel.rect_volume(x0, y0, x1, y1))


def _as_rects(rects):
    r = np.asarray(rects, dtype=float)
    return r.reshape(-1, 4), r.ndim == 1


def kde_eval(points, kernel, t, x, y, chunk=64):
    """Average kernel value at query points ``(x, y)`` (arrays broadcast)."""
    P = positions_at(points, t)
    if len(P) == 0:
        raise ValueError("kde of an empty point set")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    total = np.zeros(np.broadcast(x, y).shape)
    for p in P:
        total += kernel(x - p[0], y - p[1])
    return total / len(P)


def kde_cell_volume(points, kernel, t, rects):
    """Volume under the KDE at time ``t`` restricted to rectangle(s)."""
    P = positions_at(points, t)
    if len(P) == 0:
        raise ValueError("kde of an empty point set")
    R, single = _as_rects(rects)
    total = np.zeros(len(R))
    for px, py in P:
        total += kernel.rect_volume(R[:, 0] - px, R[:, 1] - py, R[:, 2] - px, R[:, 3] - py)
    out = total / len(P)
    return float(out[0]) if single else out


# -- independent quadrature path ------------------------------------------------

def _simpson_adaptive(f, a, b, tol, depth_cap=40):
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6 * (fa + 4 * flm + fm)
        right = (b - m) / 6 * (fm + 4 * frm + fb)
        delta = left + right - whole
        if depth >= depth_cap or abs(delta) <= 15 * tol:
            return left + right + delta / 15
        return rec(a, m, fa, flm, fm, left, tol / 2, depth + 1) + rec(m, b, fm, frm, fb, right, tol / 2, depth + 1)

    whole = (b - a) / 6 * (fa + 4 * fm + fb)
    return rec(a, b, fa, fm, fb, whole, tol, 0)


def _pieces(lo, hi, cuts):
    pts = sorted({lo, hi, *[c for c in cuts if lo < c < hi]})
    return list(zip(pts, pts[1:]))


def _inner_cuts(kernel, x):
    if kernel.kind == "pyramid":
        return (-1.0, 1.0, -abs(x), abs(x))
    if kernel.kind == "cone":
        h = np.sqrt(max(0.0, 1 - x * x))
        return (-h, 0.0, h)
    return (-1.0, 1.0)


def _outer_cuts(kernel, y0, y1):
    cuts = [-1.0, 0.0, 1.0]
    for yb in (y0, y1):
        if kernel.kind == "pyramid":
            cuts += [yb, -yb]
        elif kernel.kind == "cone" and abs(yb) < 1:
            h = np.sqrt(1 - yb * yb)
            cuts += [h, -h]
    return cuts


def quadrature_volume(kernel, rect, tol=1e-9):
    """Volume over ``rect`` by nested adaptive Simpson quadrature.

    Independent of the closed forms in :meth:`Kernel.rect_volume`; slow, so
    meant for verification.
    """
    x0, y0, x1, y1 = rect
    x0, x1 = max(x0, -1.0), min(x1, 1.0)
    y0, y1 = max(y0, -1.0), min(y1, 1.0)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    inner_tol = tol / (4 * (x1 - x0) + 1e-300)

    def inner(x):
        total = 0.0
        for a, b in _pieces(y0, y1, _inner_cuts(kernel, x)):
            total += _simpson_adaptive(lambda y: float(kernel(x, y)), a, b, inner_tol * (b - a) / (y1 - y0))
        return total

    total = 0.0
    for a, b in _pieces(x0, x1, _outer_cuts(kernel, y0, y1)):
        total += _simpson_adaptive(inner, a, b, 0.5 * tol * (b - a) / (x1 - x0))
    return total
