"""Weight-based quadtree on coreset samples at a fixed time.

A node is subdivided while the fraction of samples inside it exceeds ``rho``
and its side exceeds ``sqrt(rho)``.  Sample locations are kept as integer
coordinates on the finest admissible grid, so every cell boundary test is
exact integer arithmetic.
"""

from __future__ import annotations

import json
import math

import numpy as np

BAND = 2  # M(v) holds nodes at most this many levels above or below v
MAX_POINTERS = 46  # largest possible |M(v)| with corner contacts counted


class QNode:
    __slots__ = ("level", "ix", "iy", "count", "leaf", "M", "flag", "points")

    def __init__(self, level, ix, iy, count=0):
        self.level = level
        self.ix = ix
        self.iy = iy
        self.count = count
        self.leaf = True
        self.M = set()
        self.flag = False
        self.points = set()

    @property
    def key(self):
        return (self.level, self.ix, self.iy)

    def __repr__(self):
        return f"QNode{self.key}(count={self.count}, leaf={self.leaf})"


def key_str(key):
    return "%d:%d:%d" % key


def finest_level(D, rho):
    """Smallest level whose cells have side at most ``sqrt(rho)``."""
    root = math.sqrt(rho)
    level = 0
    while D / 2**level > root:
        level += 1
    return level


class WeightedQuadtree:
    """Quadtree over ``[0, D]^2`` keyed by ``(level, ix, iy)``."""

    def __init__(self, D, rho, n_samples):
        if n_samples <= 0:
            raise ValueError("empty coreset")
        self.D = float(D)
        self.rho = float(rho)
        self.N = int(n_samples)
        self.sqrt_rho = math.sqrt(rho)
        self.F = finest_level(self.D, self.rho)
        self.nodes = {}
        self.leaf_of = [None] * self.N
        self.coords = np.zeros((self.N, 2), dtype=np.int64)
        self.time = 0.0

    # geometry ----------------------------------------------------------------
    def side(self, level):
        return self.D / 2**level

    def region(self, node):
        s = self.side(node.level)
        return node.ix * s, node.iy * s, s

    def box(self, node):
        """Node extent in finest-grid units, ``(x0, y0, x1, y1)``."""
        c = 1 << (self.F - node.level)
        return node.ix * c, node.iy * c, (node.ix + 1) * c, (node.iy + 1) * c

    def weight(self, node):
        return node.count / self.N

    def height(self, node):
        s = self.side(node.level)
        return node.count / self.N / (s * s)

    def splittable(self, node):
        return node.count > self.rho * self.N and self.side(node.level) > self.sqrt_rho

    def finest_coords(self, P):
        """Integer cell of each position on the finest grid (half-open cells,
        closed on the domain's upper edges)."""
        P = np.asarray(P, dtype=float).reshape(-1, 2)
        bad = np.flatnonzero((P < 0).any(axis=1) | (P > self.D).any(axis=1))
        if len(bad):
            i = int(bad[0])
            raise ValueError(f"sample {i} at {tuple(P[i])} lies outside the domain [0, {self.D}]^2")
        n = 1 << self.F
        c = np.floor(P / (self.D / n)).astype(np.int64)
        return np.minimum(c, n - 1)

    def parent_key(self, key):
        level, ix, iy = key
        return (level - 1, ix >> 1, iy >> 1) if level > 0 else None

    def child_keys(self, key):
        level, ix, iy = key
        return [(level + 1, 2 * ix + a, 2 * iy + b) for a in (0, 1) for b in (0, 1)]

    def children(self, node):
        return [self.nodes[k] for k in self.child_keys(node.key)] if not node.leaf else []

    def locate(self, cx, cy):
        """Deepest existing node containing finest cell ``(cx, cy)``."""
        lo, hi = 0, self.F
        while lo < hi:
            mid = (lo + hi + 1) // 2
            sh = self.F - mid
            if (mid, cx >> sh, cy >> sh) in self.nodes:
                lo = mid
            else:
                hi = mid - 1
        sh = self.F - lo
        return self.nodes[(lo, cx >> sh, cy >> sh)]

    def leaves(self):
        return [v for v in self.nodes.values() if v.leaf]

    def depth(self):
        return max(v.level for v in self.nodes.values())

    # neighbor pointers ---------------------------------------------------------
    def touching_keys(self, key, lo_level, hi_level):
        """Existing nodes at levels ``[lo_level, hi_level]`` whose closure meets
        the closure of ``key`` while their interiors are disjoint."""
        level = key[0]
        c0 = 1 << (self.F - level)
        x0, y0 = key[1] * c0, key[2] * c0
        x1, y1 = x0 + c0, y0 + c0
        out = []
        for m in range(max(lo_level, 0), min(hi_level, self.F) + 1):
            c = 1 << (self.F - m)
            n = 1 << m
            a_lo, a_hi = max(-(-x0 // c) - 1, 0), min(x1 // c, n - 1)
            b_lo, b_hi = max(-(-y0 // c) - 1, 0), min(y1 // c, n - 1)
            for a in range(a_lo, a_hi + 1):
                ox = min(x1, (a + 1) * c) - max(x0, a * c)
                for b in range(b_lo, b_hi + 1):
                    if ox > 0 and min(y1, (b + 1) * c) - max(y0, b * c) > 0:
                        continue
                    k = (m, a, b)
                    if k in self.nodes:
                        out.append(k)
        return out

    def compute_M(self, node):
        lv = node.level
        return {self.nodes[k] for k in self.touching_keys(node.key, lv - BAND, lv + BAND)}

    def leaf_neighbors(self, node):
        """All leaves touching ``node`` (any size)."""
        return {self.nodes[k] for k in self.touching_keys(node.key, 0, self.F) if self.nodes[k].leaf}

    # local maxima ----------------------------------------------------------------
    def evaluate_flag(self, v):
        if not v.leaf:
            return False
        quarter = v.level + 2
        h = self.height(v)
        for w in v.M:
            if not w.leaf and w.level == quarter:
                return False
        for w in v.M:
            if w.leaf and self.height(w) > h:
                return False
        return True

    def mark_all(self):
        for v in self.nodes.values():
            v.flag = self.evaluate_flag(v)

    def flagged(self, epsilon=None):
        out = [v for v in self.nodes.values() if v.leaf and v.flag]
        if epsilon is not None:
            out = [v for v in out if self.height(v) >= epsilon]
        return sorted(out, key=lambda v: v.key)

    # structural edits ------------------------------------------------------------
    def _new_node(self, key, count):
        v = QNode(*key, count=count)
        self.nodes[key] = v
        return v

    def split(self, leaf, coords=None):
        """Subdivide ``leaf``; its samples move to the children by their finest
        coordinates (``coords`` overrides the stored ones).  Returns the children."""
        if not leaf.leaf:
            raise ValueError(f"{leaf.key} is not a leaf")
        if not self.splittable(leaf):
            raise ValueError(f"{leaf.key} does not satisfy the split rule")
        if coords is not None:
            for i, c in coords.items():
                self.coords[i] = c
        sh = self.F - leaf.level - 1
        kids = {}
        for k in self.child_keys(leaf.key):
            kids[k] = self._new_node(k, 0)
        for i in leaf.points:
            cx, cy = self.coords[i]
            k = (leaf.level + 1, int(cx) >> sh, int(cy) >> sh)
            kid = kids.get(k)
            if kid is None:
                raise ValueError(f"sample {i} at cell {(cx, cy)} is outside {leaf.key}")
            kid.points.add(i)
            kid.count += 1
            self.leaf_of[i] = k
        leaf.leaf = False
        leaf.points = set()
        leaf.flag = False
        self._link_children(leaf, list(kids.values()))
        return list(kids.values())

    def _link_children(self, parent, kids):
        cand = set(parent.M)
        for w in parent.M:
            if not w.leaf:
                cand.update(self.children(w))
        cand.update(kids)
        for c in kids:
            cx0, cy0, cx1, cy1 = self.box(c)
            M = set()
            for w in cand:
                if w is c or abs(w.level - c.level) > BAND:
                    continue
                wx0, wy0, wx1, wy1 = self.box(w)
                if wx1 < cx0 or cx1 < wx0 or wy1 < cy0 or cy1 < wy0:
                    continue
                if min(cx1, wx1) - max(cx0, wx0) > 0 and min(cy1, wy1) - max(cy0, wy0) > 0:
                    continue
                M.add(w)
            c.M = M
            for w in M:
                w.M.add(c)

    def merge(self, node):
        """Collapse ``node``'s four leaf children back into it."""
        if node.leaf:
            raise ValueError(f"{node.key} is already a leaf")
        kids = self.children(node)
        if any(not c.leaf for c in kids):
            raise ValueError(f"{node.key} has non-leaf children")
        if sum(c.count for c in kids) > self.rho * self.N:
            raise ValueError(f"{node.key} carries weight above rho")
        pts = set()
        for c in kids:
            pts |= c.points
            for w in c.M:
                w.M.discard(c)
            del self.nodes[c.key]
        for i in pts:
            self.leaf_of[i] = node.key
        node.points = pts
        node.leaf = True
        return node

    # checks ------------------------------------------------------------------------
    def check_invariants(self):
        """Raise ``AssertionError`` on any structural violation."""
        leaves = self.leaves()
        assert sum(v.count for v in leaves) == self.N, "leaf counts do not sum to |Q|"
        for v in self.nodes.values():
            if v.leaf:
                assert not self.splittable(v), f"leaf {v.key} should be split"
                assert v.count == len(v.points), f"leaf {v.key} count mismatch"
            else:
                assert self.splittable(v), f"internal {v.key} should be a leaf"
                assert v.count == sum(c.count for c in self.children(v)), f"{v.key} count mismatch"
            assert v.M == self.compute_M(v), f"M({v.key}) differs from geometry"
            assert len(v.M) <= MAX_POINTERS, f"|M({v.key})| = {len(v.M)}"
            for w in v.M:
                assert v in w.M, f"pointer {v.key}->{w.key} not reciprocal"
        for v in leaves:
            for i in v.points:
                assert self.leaf_of[i] == v.key

    def signature(self):
        """Hashable description used for node-for-node comparison."""
        out = {}
        for k, v in self.nodes.items():
            out[k] = (v.count, v.leaf, v.flag, frozenset(w.key for w in v.M),
                      frozenset(v.points) if v.leaf else frozenset())
        return out

    # export ----------------------------------------------------------------------
    def to_dict(self, epsilon=None):
        def rec(v):
            x, y, s = self.region(v)
            d = {"region": [x, y, s], "W": self.weight(v), "h": self.height(v) if v.leaf else None}
            if v.leaf:
                d["local_max"] = bool(v.flag)
                if epsilon is not None:
                    d["persistent"] = bool(v.flag and self.height(v) >= epsilon)
            else:
                d["children"] = [rec(c) for c in self.children(v)]
            return d

        return {"D": self.D, "rho": self.rho, "time": self.time, "root": rec(self.nodes[(0, 0, 0)])}

    def to_json(self, path, epsilon=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(epsilon), fh, indent=1)
            fh.write("\n")

    def to_svg(self, path=None, size=512, epsilon=None):
        leaves = self.leaves()
        hmax = max(self.height(v) for v in leaves) or 1.0
        k = size / self.D
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
               f'viewBox="0 0 {size} {size}">',
               f'<rect width="{size}" height="{size}" fill="white"/>']
        for v in sorted(leaves, key=lambda v: v.key):
            x, y, s = self.region(v)
            op = self.height(v) / hmax
            out.append(f'<rect x="{x * k:.3f}" y="{size - (y + s) * k:.3f}" width="{s * k:.3f}" '
                       f'height="{s * k:.3f}" fill="navy" fill-opacity="{op:.4f}" '
                       f'stroke="gray" stroke-width="0.3"/>')
        for v in self.flagged(epsilon):
            x, y, s = self.region(v)
            out.append(f'<rect x="{x * k:.3f}" y="{size - (y + s) * k:.3f}" width="{s * k:.3f}" '
                       f'height="{s * k:.3f}" fill="none" stroke="crimson" stroke-width="2"/>')
        out.append("</svg>")
        text = "\n".join(out) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _positions(coreset, t):
    if isinstance(coreset, np.ndarray):
        return np.asarray(coreset, dtype=float).reshape(-1, 2)
    return coreset.positions(t)


def build(coreset, t, rho, D):
    """Weight-based quadtree of ``coreset`` (or an ``(N, 2)`` array) at time ``t``."""
    P = _positions(coreset, t)
    tree = WeightedQuadtree(D, rho, len(P))
    tree.time = float(t)
    coords = tree.finest_coords(P)
    tree.coords = coords
    F = tree.F
    root = tree._new_node((0, 0, 0), tree.N)
    split = [root] if tree.splittable(root) else []
    active = np.arange(tree.N)
    leaf_level = np.zeros(tree.N, dtype=np.int64)
    level = 0
    while split:
        sh = F - level - 1
        cx, cy = coords[active, 0] >> sh, coords[active, 1] >> sh
        code = cx * (1 << (level + 1)) + cy
        uniq, cnt = np.unique(code, return_counts=True)
        counts = dict(zip(uniq.tolist(), cnt.tolist()))
        nxt = []
        for v in split:
            v.leaf = False
            for k in tree.child_keys(v.key):
                c = tree._new_node(k, counts.get(k[1] * (1 << (level + 1)) + k[2], 0))
                if tree.splittable(c):
                    nxt.append(c)
        level += 1
        leaf_level[active] = level
        if nxt:
            deeper = {(v.ix, v.iy) for v in nxt}
            keep = np.array([(a, b) in deeper for a, b in zip(cx.tolist(), cy.tolist())], dtype=bool)
            active = active[keep]
        split = nxt
    sh_all = F - leaf_level
    lx, ly = coords[:, 0] >> sh_all, coords[:, 1] >> sh_all
    for i, (lv, a, b) in enumerate(zip(leaf_level.tolist(), lx.tolist(), ly.tolist())):
        k = (lv, a, b)
        tree.leaf_of[i] = k
        tree.nodes[k].points.add(i)
    for v in tree.nodes.values():
        v.M = tree.compute_M(v)
    tree.mark_all()
    return tree


def point_leaf(tree, x, y):
    if not (0 <= x <= tree.D and 0 <= y <= tree.D):
        raise ValueError(f"({x}, {y}) is outside the domain")
    c = tree.finest_coords(np.array([[x, y]]))[0]
    return tree.locate(int(c[0]), int(c[1]))


def split(tree, leaf):
    return tree.split(leaf)


def merge(tree, node):
    return tree.merge(node)


def mark_persistent_maxima(tree, epsilon=None):
    """Flag leaves per the pointer-set rule; returns flagged leaves with ``h >= epsilon``."""
    tree.mark_all()
    return tree.flagged(epsilon)


def error_bound(side, lam, rho, epsilon_cor):
    """Bound on |KDE - f| inside a leaf of side ``side``."""
    if side <= 0:
        return 0.0
    return min(2 * math.sqrt(2) / 3 * lam * side, (6 * lam**2 * (rho + 2 * epsilon_cor)) ** (1 / 3)) \
        + epsilon_cor / side**2


def node_count_bound(D, rho, z_star=1.0):
    return 4.0 / rho * math.log2(2 * D / math.sqrt(rho / z_star))


def depth_bound(D, rho, z_star=1.0):
    return math.log2(2 * D / math.sqrt(rho / z_star))


def step_eval(tree, x, y):
    return tree.height(point_leaf(tree, x, y))


def rasterize(tree, res):
    """Leaf heights sampled at the centers of a ``res x res`` pixel grid."""
    D = tree.D
    c = (np.arange(res) + 0.5) * D / res
    X, Y = np.meshgrid(c, c, indexing="ij")
    coords = tree.finest_coords(np.stack([X.ravel(), Y.ravel()], axis=1))
    out = np.empty(len(coords))
    cache = {}
    for i, (a, b) in enumerate(coords.tolist()):
        v = tree.locate(a, b)
        h = cache.get(v.key)
        if h is None:
            h = cache[v.key] = tree.height(v)
        out[i] = h
    return out.reshape(res, res)
