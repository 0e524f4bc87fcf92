"""Volume-based reference quadtree of a function given by a volume oracle."""

from __future__ import annotations

import math

import numpy as np

MAX_DEPTH = 60


class RefNode:
    __slots__ = ("level", "ix", "iy", "x0", "y0", "size", "mass", "children")

    def __init__(self, level, ix, iy, x0, y0, size, mass):
        self.level = level
        self.ix = ix
        self.iy = iy
        self.x0 = x0
        self.y0 = y0
        self.size = size
        self.mass = mass
        self.children = None

    @property
    def is_leaf(self):
        return self.children is None

    @property
    def height(self):
        return self.mass / (self.size * self.size)

    @property
    def rect(self):
        return (self.x0, self.y0, self.x0 + self.size, self.y0 + self.size)

    @property
    def key(self):
        return (self.level, self.ix, self.iy)

    def __repr__(self):
        return f"RefNode{self.key}(mass={self.mass:.4g})"


def _touch(a, b):
    """Closures intersect while interiors are disjoint."""
    ax0, ay0, ax1, ay1 = a.rect
    bx0, by0, bx1, by1 = b.rect
    if ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0:
        return False
    return not (min(ax1, bx1) > max(ax0, bx0) and min(ay1, by1) > max(ay0, by0))


class StepFunction:
    """Piecewise-constant function given by the leaves of a quadtree."""

    def __init__(self, root, D, rho):
        self.root = root
        self.D = D
        self.rho = rho

    def nodes(self):
        stack = [self.root]
        while stack:
            v = stack.pop()
            yield v
            if v.children:
                stack.extend(v.children)

    def leaves(self):
        return sorted((v for v in self.nodes() if v.is_leaf), key=lambda v: v.key)

    def depth(self):
        return max(v.level for v in self.nodes())

    def locate(self, x, y):
        if not (0 <= x <= self.D and 0 <= y <= self.D):
            raise ValueError(f"({x}, {y}) is outside the domain [0, {self.D}]^2")
        v = self.root
        while v.children:
            half = v.size / 2
            i = 2 * int(x >= v.x0 + half) + int(y >= v.y0 + half)
            v = v.children[i]
        return v

    def __call__(self, x, y):
        return self.locate(x, y).height

    def neighbors(self, leaf):
        out = []
        stack = [self.root]
        while stack:
            v = stack.pop()
            x0, y0, x1, y1 = v.rect
            lx0, ly0, lx1, ly1 = leaf.rect
            if x1 < lx0 or lx1 < x0 or y1 < ly0 or ly1 < y0 or v is leaf:
                continue
            if v.is_leaf:
                if _touch(v, leaf):
                    out.append(v)
            else:
                stack.extend(v.children)
        return sorted(out, key=lambda v: v.key)

    def mark_local_maxima(self):
        return [v for v in self.leaves() if all(v.height >= w.height for w in self.neighbors(v))]

    def raster(self, res):
        c = (np.arange(res) + 0.5) * self.D / res
        return np.array([[self(x, y) for y in c] for x in c])


def build_volume_quadtree(volume_oracle, D, rho, max_depth=MAX_DEPTH):
    """Subdivide every cell whose volume exceeds ``rho``; leaf height is the cell average."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    total = float(volume_oracle((0.0, 0.0, D, D)))
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"oracle volume over the domain is {total}, expected 1")
    root = RefNode(0, 0, 0, 0.0, 0.0, float(D), total)
    stack = [root]
    while stack:
        v = stack.pop()
        if v.mass < 0:
            raise ValueError(f"oracle returned negative volume {v.mass} on {v.rect}")
        if v.mass <= rho:
            continue
        if v.level >= max_depth:
            raise RuntimeError(f"required depth exceeds {max_depth}; oracle is not a bounded density")
        half = v.size / 2
        kids = []
        for a in (0, 1):
            for b in (0, 1):
                x0, y0 = v.x0 + a * half, v.y0 + b * half
                m = float(volume_oracle((x0, y0, x0 + half, y0 + half)))
                kids.append(RefNode(v.level + 1, 2 * v.ix + a, 2 * v.iy + b, x0, y0, half, m))
        v.children = kids
        stack.extend(kids)
    return StepFunction(root, float(D), rho)


def step_eval(sf, x, y):
    return sf(x, y)


def neighbors(sf, leaf):
    return sf.neighbors(leaf)


def mark_local_maxima(sf):
    return sf.mark_local_maxima()


def error_bound(size, lam, rho):
    """Bound on |f - f_T| inside a leaf of side ``size`` for a ``lam``-Lipschitz ``f``."""
    if size <= 0 or lam <= 0:
        return 0.0
    return min(2 * math.sqrt(2) / 3 * lam * size, (6 * lam**2 * rho) ** (1 / 3))


def min_leaf_side(rho, z_star):
    return 0.5 * math.sqrt(rho / z_star)


def depth_bound(D, rho, z_star):
    return math.log2(2 * D / math.sqrt(rho / z_star))


def node_count_bound(D, rho, z_star):
    return 4.0 / rho * depth_bound(D, rho, z_star)
