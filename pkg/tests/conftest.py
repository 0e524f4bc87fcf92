import numpy as np
import pytest

from kinetic_kde.coreset import Coreset
from kinetic_kde.kernel import make_kernel
from kinetic_kde.motion import MovingPoint


def static_coreset(P, points=None):
    """Coreset whose samples are the given static positions (one source point each)."""
    P = np.asarray(P, dtype=float).reshape(-1, 2)
    pts = points or [MovingPoint.linear(i, x, y) for i, (x, y) in enumerate(P)]
    return Coreset(pts, np.arange(len(pts)), np.zeros((len(pts), 2)), 0.0)


def moving_coreset(P, V):
    P = np.asarray(P, dtype=float).reshape(-1, 2)
    V = np.asarray(V, dtype=float).reshape(-1, 2)
    pts = [MovingPoint.linear(i, *p, *v) for i, (p, v) in enumerate(zip(P, V))]
    return Coreset(pts, np.arange(len(pts)), np.zeros((len(pts), 2)), 0.0)


def brute_M(tree, v, band=2):
    """Pointer set from pairwise geometry over every node of the tree."""
    x0, y0, s0 = tree.region(v)
    out = set()
    for w in tree.nodes.values():
        if w is v or abs(w.level - v.level) > band:
            continue
        x1, y1, s1 = tree.region(w)
        ox = min(x0 + s0, x1 + s1) - max(x0, x1)
        oy = min(y0 + s0, y1 + s1) - max(y0, y1)
        if ox < -1e-12 or oy < -1e-12:
            continue
        if ox > 1e-12 and oy > 1e-12:
            continue
        out.add(w.key)
    return out


@pytest.fixture(scope="session")
def pyramid():
    return make_kernel("pyramid")


@pytest.fixture(params=["pyramid", "cone", "truncated-gaussian"], scope="session")
def kernel(request):
    return make_kernel(request.param)
