"""0-dimensional persistence of maxima, bottleneck distance, and maxima injection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching


@dataclass
class CellComplex:
    """Cells with heights and a symmetric adjacency in CSR form."""

    heights: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    shape: tuple = None  # raster shape when built from a grid

    def __len__(self):
        return len(self.heights)

    def neighbors(self, i):
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    @classmethod
    def from_lists(cls, heights, adjacency):
        heights = np.asarray(heights, dtype=float)
        indptr = np.zeros(len(heights) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(a) for a in adjacency])
        indices = np.array([j for a in adjacency for j in a], dtype=np.int64)
        return cls(heights, indptr, indices)

    @classmethod
    def path(cls, heights):
        n = len(heights)
        adj = [[j for j in (i - 1, i + 1) if 0 <= j < n] for i in range(n)]
        return cls.from_lists(heights, adj)

    @classmethod
    def from_raster(cls, grid):
        """Pixels with edge-or-corner adjacency; cell index is the row-major position."""
        g = np.asarray(grid, dtype=float)
        R, C = g.shape
        idx = np.arange(R * C).reshape(R, C)
        rows, cols = [], []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                a = idx[max(0, -dr) : R - max(0, dr), max(0, -dc) : C - max(0, dc)]
                b = idx[max(0, dr) : R - max(0, -dr), max(0, dc) : C - max(0, -dc)]
                rows.append(a.ravel())
                cols.append(b.ravel())
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.zeros(R * C + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(g.ravel().copy(), np.cumsum(indptr), cols, (R, C))

    @classmethod
    def from_tree(cls, tree):
        """Leaves of a weight-based quadtree with touching-leaf adjacency."""
        leaves = sorted(tree.leaves(), key=lambda v: v.key)
        index = {v.key: i for i, v in enumerate(leaves)}
        adj = [sorted(index[w.key] for w in tree.leaf_neighbors(v)) for v in leaves]
        cc = cls.from_lists([tree.height(v) for v in leaves], adj)
        cc.shape = None
        return cc, leaves


@dataclass
class PersistenceDiagram:
    """Birth-death pairs of the maxima filtration (birth >= death)."""

    pairs: np.ndarray  # (k, 2)
    essential: np.ndarray  # (k,) bool
    cells: np.ndarray = field(default=None)  # birth cell per pair

    def __len__(self):
        return len(self.pairs)

    @property
    def persistence(self):
        return self.pairs[:, 0] - self.pairs[:, 1] if len(self.pairs) else np.zeros(0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
            w.writerow(["birth", "death", "persistence", "essential"])
            for (b, d), e in zip(self.pairs, self.essential):
                w.writerow([repr(float(b)), repr(float(d)), repr(float(b - d)), int(bool(e))])

    @classmethod
    def from_pairs(cls, pairs, essential=None):
        p = np.asarray(pairs, dtype=float).reshape(-1, 2)
        e = np.zeros(len(p), dtype=bool) if essential is None else np.asarray(essential, dtype=bool)
        return cls(p, e, np.full(len(p), -1))


def maxima_persistence(cx, keep_zero=False):
    """Sweep cells from high to low with union-find.

    A cell with no already-processed neighbor starts a component.  When
    components meet, the one born lower (later in the sweep) dies at the
    current height.  Zero-persistence pairs, which come from plateaus, are
    dropped unless ``keep_zero``.  Each surviving component gets the global
    minimum as its death and is marked essential.
    """
    h = np.asarray(cx.heights, dtype=float)
    n = len(h)
    if n == 0:
        return PersistenceDiagram(np.zeros((0, 2)), np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64))
    order = np.lexsort((np.arange(n), -h))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    parent = np.full(n, -1, dtype=np.int64)
    birth_cell = {}
    pairs, cells = [], []
    indptr, indices = cx.indptr, cx.indices
    par = parent.tolist()
    rk = rank.tolist()
    hl = h.tolist()
    ip = indptr.tolist()
    ind = indices.tolist()

    def find(x):
        root = x
        while par[root] != root:
            root = par[root]
        while par[x] != root:
            par[x], x = root, par[x]
        return root

    for c in order.tolist():
        roots = set()
        for j in ind[ip[c] : ip[c + 1]]:
            if par[j] != -1:
                roots.add(find(j))
        if not roots:
            par[c] = c
            birth_cell[c] = c
            continue
        # oldest component survives: earliest birth in sweep order
        rs = sorted(roots, key=lambda r: rk[birth_cell[r]])
        keep = rs[0]
        for r in rs[1:]:
            b = birth_cell.pop(r)
            if keep_zero or hl[b] > hl[c]:
                pairs.append((hl[b], hl[c]))
                cells.append(b)
            par[r] = keep
        par[c] = keep
    gmin = float(h.min())
    ess = []
    for r, b in sorted(birth_cell.items(), key=lambda kv: rk[kv[1]]):
        ess.append(len(pairs))
        pairs.append((hl[b], gmin))
        cells.append(b)
    essential = np.zeros(len(pairs), dtype=bool)
    essential[ess] = True
    return PersistenceDiagram(np.array(pairs, dtype=float).reshape(-1, 2), essential,
                              np.array(cells, dtype=np.int64))


def persistent_maxima(diagram, threshold):
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    keep = diagram.persistence > threshold
    return [tuple(p) for p in diagram.pairs[keep]]


def _augmented_costs(A, B):
    """Cost matrix of the diagonal-augmented assignment problem, plus the
    finite candidate distances."""
    m, k = len(A), len(B)
    C = np.full((m + k, k + m), np.inf)
    if m and k:
        C[:m, :k] = np.max(np.abs(A[:, None, :] - B[None, :, :]), axis=2)
    if m:
        C[np.arange(m), k + np.arange(m)] = (A[:, 0] - A[:, 1]) / 2
    if k:
        C[m + np.arange(k), np.arange(k)] = (B[:, 0] - B[:, 1]) / 2
    C[m:, k:] = 0.0
    return C


def _perfect_at(C, delta):
    rows, cols = np.nonzero(C <= delta)
    n = C.shape[0]
    g = csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=C.shape)
    match = maximum_bipartite_matching(g, perm_type="column")
    return bool(np.all(match >= 0)), match


def bottleneck_matching(d1, d2):
    """Return ``(distance, matching)`` where ``matching[i]`` is the index of
    the pair of ``d2`` matched to pair ``i`` of ``d1``, or -1 for the diagonal."""
    A = np.asarray(d1.pairs, dtype=float).reshape(-1, 2)
    B = np.asarray(d2.pairs, dtype=float).reshape(-1, 2)
    m, k = len(A), len(B)
    if m == 0 and k == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    C = _augmented_costs(A, B)
    cand = np.unique(C[np.isfinite(C)])
    lo, hi = 0, len(cand) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _perfect_at(C, cand[mid])[0]:
            hi = mid
        else:
            lo = mid + 1
    _, best = _perfect_at(C, cand[lo])
    out = np.where(best[:m] < k, best[:m], -1) if m else np.zeros(0, dtype=np.int64)
    return float(cand[lo]), out.astype(np.int64)


def bottleneck_distance(d1, d2):
    return bottleneck_matching(d1, d2)[0]


@dataclass
class InjectionReport:
    ok: bool
    gap: float
    bottleneck: float
    matches: list  # (cell in f, cell in f_T)
    unmatched: list  # cells of f without a partner
    message: str = ""


def check_injection(f, fT, epsilon):
    """Match every maximum of ``f`` with persistence above ``2 epsilon`` to a
    distinct maximum of ``fT`` through an optimal bottleneck matching."""
    hf = np.asarray(f.heights, dtype=float)
    hg = np.asarray(fT.heights, dtype=float)
    if hf.shape != hg.shape:
        raise ValueError("complexes must share a raster")
    gap = float(np.max(np.abs(hf - hg))) if len(hf) else 0.0
    df, dg = maxima_persistence(f), maxima_persistence(fT)
    dist, match = bottleneck_matching(df, dg)
    msgs = []
    ok = True
    if gap >= epsilon:
        ok = False
        msgs.append(f"pointwise gap {gap:.4g} is not below epsilon {epsilon:.4g}")
    if dist > gap + 1e-9:
        ok = False
        msgs.append(f"bottleneck distance {dist:.4g} exceeds pointwise gap {gap:.4g}")
    matches, unmatched = [], []
    used = set()
    for i in np.flatnonzero(df.persistence > 2 * epsilon):
        j = int(match[i])
        if j < 0 or j in used:
            unmatched.append(int(df.cells[i]))
        else:
            used.add(j)
            matches.append((int(df.cells[i]), int(dg.cells[j])))
    if unmatched:
        ok = False
        msgs.append(f"{len(unmatched)} persistent maxima without a partner")
    return InjectionReport(ok, gap, dist, matches, unmatched, "; ".join(msgs))
