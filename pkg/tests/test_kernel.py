import math

import numpy as np
import pytest

from kinetic_kde.kernel import Kernel, cell_volume, eval as keval, kde_cell_volume, kde_eval, make_kernel, \
    quadrature_volume
from kinetic_kde.motion import MovingPoint


def test_point_values():
    assert keval(make_kernel("pyramid"), 0.0, 0.0) == pytest.approx(0.75)
    assert keval(make_kernel("cone"), 1.0, 0.0) == 0.0
    assert keval(make_kernel("cone"), 0.0, 0.0) == pytest.approx(3 / math.pi, abs=1e-6)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        Kernel("uniform")


def test_gaussian_alias():
    assert make_kernel("gaussian").kind == "truncated-gaussian"


def test_zero_outside_support(kernel):
    d = np.array([1.0, 1.5, -1.0, 3.0])
    assert np.all(kernel(d, np.zeros(4)) == 0)
    assert np.all(kernel(np.zeros(4), d) == 0)


def test_unit_volume(kernel):
    assert cell_volume(kernel, (-1, -1, 1, 1)) == pytest.approx(1.0, abs=1e-12)
    assert quadrature_volume(kernel, (-1, -1, 1, 1)) == pytest.approx(1.0, abs=1e-8)


def test_symmetric_pieces():
    p, c = make_kernel("pyramid"), make_kernel("cone")
    assert cell_volume(p, (0, -1, 1, 1)) == pytest.approx(0.5, abs=1e-12)
    assert cell_volume(c, (0, 0, 1, 1)) == pytest.approx(0.25, abs=1e-12)


def test_closed_form_matches_quadrature(kernel):
    rng = np.random.default_rng(4)
    for _ in range(25):
        a = rng.uniform(-1.3, 1.0, 2)
        s = rng.uniform(0.01, 1.5, 2)
        rect = (a[0], a[1], a[0] + s[0], a[1] + s[1])
        assert cell_volume(kernel, rect) == pytest.approx(quadrature_volume(kernel, rect), abs=1e-7)


def test_empty_and_inverted_rect(kernel):
    assert cell_volume(kernel, (0.2, 0.2, 0.2, 0.9)) == 0.0
    assert cell_volume(kernel, (0.5, 0.0, 0.1, 0.3)) == 0.0


def test_lipschitz_constant_bounds_difference_quotients(kernel):
    rng = np.random.default_rng(1)
    a = rng.uniform(-1.2, 1.2, (20000, 2))
    b = a + rng.normal(0, 0.05, a.shape)
    q = np.abs(kernel(*a.T) - kernel(*b.T)) / np.linalg.norm(a - b, axis=1)
    assert q.max() <= kernel.lipschitz + 1e-9
    # and the constant is not loose
    assert q.max() > 0.9 * kernel.lipschitz


def test_known_constants():
    assert make_kernel("pyramid").lipschitz == pytest.approx(0.75)
    assert make_kernel("cone").lipschitz == pytest.approx(3 / math.pi)
    assert make_kernel("pyramid").peak == pytest.approx(0.75)


def test_gradient_matches_finite_differences(kernel):
    rng = np.random.default_rng(2)
    P = rng.uniform(-0.9, 0.9, (200, 2))
    h = 1e-6
    gx, gy = kernel.gradient(P[:, 0], P[:, 1])
    fx = (kernel(P[:, 0] + h, P[:, 1]) - kernel(P[:, 0] - h, P[:, 1])) / (2 * h)
    fy = (kernel(P[:, 0], P[:, 1] + h) - kernel(P[:, 0], P[:, 1] - h)) / (2 * h)
    # skip points next to kinks of the piecewise-linear kernels
    ok = (np.abs(np.abs(P[:, 0]) - np.abs(P[:, 1])) > 1e-3) & (np.hypot(*P.T) > 1e-3)
    assert np.allclose(gx[ok], fx[ok], atol=1e-5)
    assert np.allclose(gy[ok], fy[ok], atol=1e-5)


def test_kde_eval_examples(kernel):
    one = [MovingPoint.linear(0, 0.0, 0.0)]
    assert kde_eval(one, kernel, 0.0, 0.0, 0.0) == pytest.approx(kernel.peak)
    two = [MovingPoint.linear(0, 2.0, 3.0), MovingPoint.linear(1, 2.0, 3.0)]
    assert kde_eval(two, kernel, 0.0, 2.0, 3.0) == pytest.approx(kernel.peak)
    assert kde_eval(two, kernel, 0.0, 3.5, 3.0) == 0.0


def test_kde_follows_motion(pyramid):
    p = [MovingPoint.linear(0, 1.0, 1.0, 2.0, 0.0)]
    assert kde_eval(p, pyramid, 0.5, 2.0, 1.0) == pytest.approx(0.75)


def test_kde_empty_rejected(pyramid):
    with pytest.raises(ValueError):
        kde_eval([], pyramid, 0.0, 0.0, 0.0)


def test_kde_cell_volume_examples(kernel):
    rng = np.random.default_rng(0)
    pts = [MovingPoint.linear(i, *rng.uniform(1.5, 6.5, 2), *rng.normal(0, 0.3, 2)) for i in range(7)]
    assert kde_cell_volume(pts, kernel, 0.7, (0, 0, 8, 8)) == pytest.approx(1.0, abs=1e-8)
    one = [MovingPoint.linear(0, 4.0, 4.0)]
    assert kde_cell_volume(one, kernel, 0.0, (3, 3, 5, 5)) == pytest.approx(1.0, abs=1e-12)
    two = [MovingPoint.linear(0, 2.0, 2.0), MovingPoint.linear(1, 6.0, 6.0)]
    assert kde_cell_volume(two, kernel, 0.0, (1, 1, 3, 3)) == pytest.approx(0.5, abs=1e-12)


def test_kde_cell_volume_is_additive(pyramid):
    pts = [MovingPoint.linear(0, 4.1, 3.7), MovingPoint.linear(1, 4.6, 4.2)]
    whole = kde_cell_volume(pts, pyramid, 0.0, (3.5, 3.5, 5.0, 5.0))
    parts = kde_cell_volume(pts, pyramid, 0.0, [(3.5, 3.5, 4.2, 5.0), (4.2, 3.5, 5.0, 5.0)])
    assert parts.sum() == pytest.approx(whole, abs=1e-12)
