"""Coresets of moving sample points for square-range volume queries under a KDE.

A kernel is discretized on an ``r x r`` grid (``ceil(r z(c))`` points per
cell), reduced once by verified random halving, and copied onto every input
point.  The copies are then combined in a merge-reduce forest whose nodes are
halved again while the per-level error budget allows.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .counting import count_in_rects, grid_index_range, hilbert_index, summed_area
from .kernel import Kernel, kde_cell_volume, make_kernel
from .motion import MovingPoint, Segment, positions_at, velocities_at

MAX_RETRIES = 64
# give up before MAX_RETRIES when the best candidate so far is far outside budget
EARLY_ABORT = 8
HOPELESS = 1.5
NODE_COPIES = 8
SIZE_CONSTANT = 16.0  # c0 in |Q| <= c0 / eps^2 * log(1 / eps), measured for n <= 200


class HalvingError(RuntimeError):
    """No halving within the error budget was found."""


def choose_parameters(epsilon, lam, z_star=1.0):
    """Return ``(rho, epsilon_cor, epsilon_dsc)`` for target error ``epsilon``."""
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    if lam <= 0:
        raise ValueError("lipschitz constant must be positive")
    if not 0 < z_star <= 1:
        raise ValueError(f"z_star must lie in (0, 1], got {z_star}")
    denom = 8.0 + 2.0 * epsilon * z_star
    rho = epsilon**3 / (6.0 * lam**2 * denom)
    eps_cor = epsilon**4 * z_star / (48.0 * lam**2 * denom)
    return rho, eps_cor, eps_cor / 3.0


def size_bound(epsilon_cor, c0=SIZE_CONSTANT):
    return c0 / epsilon_cor**2 * math.log(1.0 / epsilon_cor)


# -- kernel grid sampling ---------------------------------------------------------

@dataclass
class GridSampling:
    """Multiset of offsets at the centers of an ``r x r`` grid on [-1, 1]^2."""

    kernel: Kernel
    r: int
    counts: np.ndarray  # (r, r), indexed [ix, iy]

    @property
    def h(self):
        return 2.0 / self.r

    @property
    def centers(self):
        return -1.0 + (np.arange(self.r) + 0.5) * self.h

    @property
    def size(self):
        return int(self.counts.sum())

    @property
    def offsets(self):
        ix, iy = np.nonzero(self.counts)
        rep = self.counts[ix, iy]
        c = self.centers
        return np.repeat(np.stack([c[ix], c[iy]], axis=1), rep, axis=0)

    def count_in(self, rects, counts=None):
        counts = self.counts if counts is None else counts
        return _grid_counts(summed_area(counts), rects, self.r)

    def range_error(self, rects):
        """Max over ``rects`` of |fraction in rect - kernel volume|."""
        rects = np.asarray(rects, dtype=float).reshape(-1, 4)
        if len(rects) == 0:
            return 0.0
        frac = self.count_in(rects) / self.size
        vol = self.kernel.rect_volume(*rects.T)
        return float(np.max(np.abs(frac - vol)))


def _grid_counts(S, rects, r, shift=(0.0, 0.0)):
    rects = np.asarray(rects, dtype=float).reshape(-1, 4)
    h = 2.0 / r
    i0, i1 = grid_index_range(rects[:, 0] - shift[0], rects[:, 2] - shift[0], -1.0, h, r)
    j0, j1 = grid_index_range(rects[:, 1] - shift[1], rects[:, 3] - shift[1], -1.0, h, r)
    return S[i1, j1] - S[i0, j1] - S[i1, j0] + S[i0, j0]


def grid_sample(kernel, r):
    """Place ``ceil(r z(c))`` offsets at the center of each cell ``c`` of an r x r grid."""
    if r < 1:
        raise ValueError("grid resolution must be positive")
    e = np.linspace(-1.0, 1.0, r + 1)
    X0, Y0 = np.meshgrid(e[:-1], e[:-1], indexing="ij")
    X1, Y1 = np.meshgrid(e[1:], e[1:], indexing="ij")
    vol = kernel.rect_volume(X0, Y0, X1, Y1)
    z = vol / (2.0 / r) ** 2
    counts = np.where(vol > 0, np.ceil(r * z - 1e-9), 0).astype(np.int64)
    return GridSampling(kernel, int(r), counts)


def kernel_probe_rects(n, seed=0):
    """Random squares around the kernel support, in kernel coordinates."""
    rng = np.random.default_rng(seed)
    side = rng.uniform(0.0, 2.0, n)
    lo = rng.uniform(-1.0 - side, 1.0)
    lo2 = rng.uniform(-1.0 - side, 1.0)
    return np.stack([lo, lo2, lo + side, lo2 + side], axis=1)


def choose_resolution(kernel, epsilon_dsc, probes, r_min=36, max_resolution=2048, growth=1.25):
    """Smallest resolution on a geometric ladder whose measured sampling error
    is at most ``epsilon_dsc``; returns ``(GridSampling, measured, met)``."""
    r = max(r_min, int(math.ceil(0.5 / epsilon_dsc)))
    while True:
        r = min(r, max_resolution)
        gs = grid_sample(kernel, r)
        err = gs.range_error(probes)
        if err <= epsilon_dsc or r >= max_resolution:
            return gs, err, err <= epsilon_dsc
        r = int(math.ceil(r * growth))


# -- halving ----------------------------------------------------------------------

def halve_counts(c, rng):
    """Halve a multiplicity vector whose entries are in pairing order.

    Even multiplicities split evenly; odd leftovers are paired consecutively
    and one of each pair is kept at random.  Returns ``(new, padded)`` where
    ``padded`` says whether one sample was duplicated to make the total even.
    """
    c = np.asarray(c, dtype=np.int64).copy()
    odd = np.flatnonzero(c & 1)
    padded = bool(len(odd) % 2)
    if padded:
        c[odd[-1]] += 1
        odd = odd[:-1]
    new = c // 2
    if len(odd):
        pairs = odd.reshape(-1, 2)
        pick = rng.integers(0, 2, len(pairs))
        np.add.at(new, pairs[np.arange(len(pairs)), pick], 1)
    return new, padded


@dataclass
class ProbeFamily:
    """Square ranges paired with query times."""

    rects: np.ndarray  # (K, 4) as x0, y0, x1, y1
    times: np.ndarray  # (K,)

    def __len__(self):
        return len(self.times)

    @property
    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.rects, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.times, dtype="<f8").tobytes())
        return h.hexdigest()

    def groups(self):
        """Yield ``(t, index array)`` per distinct time."""
        order = np.argsort(self.times, kind="stable")
        t = self.times[order]
        cuts = np.flatnonzero(np.diff(t)) + 1
        for idx in np.split(order, cuts):
            if len(idx):
                yield float(self.times[idx[0]]), idx

    def concat(self, other):
        return ProbeFamily(np.vstack([self.rects, other.rects]), np.concatenate([self.times, other.times]))


def probe_times(T, n_times=16, n_random=16, seed=0):
    rng = np.random.default_rng([seed, 7])
    even = np.linspace(0.0, T, n_times) if T > 0 else np.zeros(1)
    extra = rng.uniform(0.0, T, n_random) if T > 0 else np.zeros(0)
    return even, extra


def make_probe_family(points, D, T, rho=None, seed=0, n_random=10_000, n_times=16,
                      n_random_times=16, n_anchor=64, anchor_offsets=None):
    """The verification family: anchored squares at evenly spaced and random
    times, quadtree cells of side at least ``sqrt(rho)/2`` that meet some
    kernel support at the evenly spaced times, and seeded random squares
    at uniform random times."""
    rng = np.random.default_rng([seed, 11])
    even, extra = probe_times(T, n_times, n_random_times, seed)
    rects, times = [], []
    all_times = np.concatenate([even, extra])
    for t in all_times:
        P = positions_at(points, t)
        k = rng.integers(0, len(P), n_anchor)
        if anchor_offsets is not None and len(anchor_offsets):
            off = anchor_offsets[rng.integers(0, len(anchor_offsets), n_anchor)]
        else:
            off = rng.uniform(-1, 1, (n_anchor, 2))
        a = P[k] + off
        side = rng.uniform(0.02, 2.0, n_anchor)
        sx = rng.choice([-1.0, 1.0], n_anchor)
        sy = rng.choice([-1.0, 1.0], n_anchor)
        x0 = np.where(sx > 0, a[:, 0], a[:, 0] - side)
        y0 = np.where(sy > 0, a[:, 1], a[:, 1] - side)
        rects.append(np.stack([x0, y0, x0 + side, y0 + side], axis=1))
        times.append(np.full(n_anchor, t))
    if rho is not None:
        for t in even:
            P = positions_at(points, t)
            cells = aligned_cells_near(P, D, math.sqrt(rho) / 2)
            rects.append(cells)
            times.append(np.full(len(cells), t))
    # random squares spread over the probe times, centered near random points
    if n_random:
        tt = all_times[np.arange(n_random) % len(all_times)]
        k = rng.integers(0, len(points), n_random)
        P_all = {t: positions_at(points, t) for t in all_times}
        centers = np.array([P_all[t][i] for i, t in zip(k, tt)])
        centers = centers + rng.uniform(-1.2, 1.2, (n_random, 2))
        side = rng.uniform(0.0, 2.4, n_random)
        rects.append(np.stack([centers[:, 0] - side / 2, centers[:, 1] - side / 2,
                               centers[:, 0] + side / 2, centers[:, 1] + side / 2], axis=1))
        times.append(tt)
    # the whole domain once
    rects.append(np.array([[0.0, 0.0, D, D]]))
    times.append(np.zeros(1))
    return ProbeFamily(np.vstack(rects), np.concatenate(times))


def verification_probes(points, T, n=10_000, seed=0, n_times=100):
    """Seeded random squares near the input, spread over ``n_times`` uniform random times."""
    rng = np.random.default_rng([seed, 23])
    times = np.sort(rng.uniform(0.0, T, n_times)) if T > 0 else np.zeros(1)
    which = rng.integers(0, len(times), n)
    tt = times[which]
    k = rng.integers(0, len(points), n)
    centers = np.empty((n, 2))
    for j, t in enumerate(times):
        m = which == j
        centers[m] = positions_at(points, t)[k[m]]
    centers += rng.uniform(-1.2, 1.2, (n, 2))
    side = rng.uniform(0.0, 2.4, n)
    rects = np.stack([centers[:, 0] - side / 2, centers[:, 1] - side / 2,
                      centers[:, 0] + side / 2, centers[:, 1] + side / 2], axis=1)
    return ProbeFamily(rects, tt)


def aligned_cells_near(P, D, min_side):
    """Quadtree cells of side >= ``min_side`` meeting some square ``[p - 1, p + 1]^2``."""
    out = []
    level = 0
    while D / 2**level >= min_side:
        n = 2**level
        s = D / n
        lo = np.clip(np.floor((P - 1.0) / s), 0, n - 1).astype(np.int64)
        hi = np.clip(np.ceil((P + 1.0) / s) - 1, 0, n - 1).astype(np.int64)
        mask = np.zeros((n, n), dtype=bool)
        for (a, b), (c, d) in zip(lo, hi):
            mask[a : c + 1, b : d + 1] = True
        ix, iy = np.nonzero(mask)
        out.append(np.stack([ix * s, iy * s, (ix + 1) * s, (iy + 1) * s], axis=1))
        level += 1
    return np.vstack(out) if out else np.zeros((0, 4))


def _discrepancy(pos_full, pos_half, probes):
    """Max over probes of |fraction of half - fraction of full|."""
    worst = 0.0
    n_full = len(pos_full(0.0))
    n_half = len(pos_half(0.0))
    for t, idx in probes.groups():
        a = count_in_rects(pos_full(t), probes.rects[idx]) / n_full
        b = count_in_rects(pos_half(t), probes.rects[idx]) / n_half
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def halve(samples, error_budget, probes, seed=0, max_retries=MAX_RETRIES):
    """Keep one sample of each spatially adjacent pair, chosen at random.

    Samples are paired along a Hilbert order of their positions at the first
    probe time.  A candidate is accepted once its discrepancy on ``probes`` is
    within ``error_budget``; odd input is padded by duplicating one sample.
    Returns ``(half, discrepancy)``; raises :class:`HalvingError` after
    ``max_retries`` rejected candidates.
    """
    samples = list(samples)
    if not samples:
        return [], 0.0
    t_ref = float(np.min(probes.times)) if len(probes) else 0.0
    P = positions_at(samples, t_ref)
    lo, hi = P.min(axis=0), P.max(axis=0)
    order = list(hilbert_order_positions(P, lo, hi))
    if len(order) % 2:
        order.append(order[-1])
    pairs = np.array(order).reshape(-1, 2)
    full = samples
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max_retries):
        pick = rng.integers(0, 2, len(pairs))
        half = [samples[i] for i in pairs[np.arange(len(pairs)), pick]]
        disc = _discrepancy(lambda t: _padded_positions(full, order, t),
                            lambda t: positions_at(half, t), probes) if len(probes) else 0.0
        if disc <= error_budget:
            return half, disc
        best = disc if best is None else min(best, disc)
    raise HalvingError(f"no halving within budget {error_budget:.3g} (best {best:.3g}) after {max_retries} tries")


def _padded_positions(samples, order, t):
    return positions_at([samples[i] for i in order], t)


def hilbert_order_positions(P, lo, hi, order=16):
    span = max(float(np.max(hi - lo)), 1e-12)
    n = 1 << order
    q = np.clip(((P - lo) / span * (n - 1)).astype(np.int64), 0, n - 1)
    return np.argsort(hilbert_index(q[:, 0], q[:, 1], order), kind="stable")


# -- shared per-kernel approximation ------------------------------------------------

@dataclass
class KernelApprox:
    """Grid sample of one kernel and its verified halved sub-multiset."""

    grid: GridSampling
    cells: np.ndarray  # flat grid indices in Hilbert order
    base: np.ndarray  # multiplicities of the full grid sample on ``cells``
    counts: np.ndarray  # multiplicities of the reduced sample on ``cells``
    halvings: int = 0
    sampling_error: float = 0.0
    halving_error: float = 0.0
    padded: int = 0

    @property
    def size(self):
        return int(self.counts.sum())

    @property
    def cell_offsets(self):
        c = self.grid.centers
        ix, iy = np.divmod(self.cells, self.grid.r)
        return np.stack([c[ix], c[iy]], axis=1)

    def dense(self, counts):
        g = np.zeros(self.grid.r * self.grid.r, dtype=counts.dtype)
        g[self.cells] = counts
        return g.reshape(self.grid.r, self.grid.r)


def reduce_kernel_sample(grid, budget, probes, seed=0, min_size=1, max_retries=MAX_RETRIES):
    """Halve the grid sample repeatedly while the cumulative discrepancy on
    kernel-relative ``probes`` stays within ``budget``."""
    r = grid.r
    ix, iy = np.nonzero(grid.counts)
    order = int(math.ceil(math.log2(max(r, 2))))
    hk = hilbert_index(ix, iy, order)
    srt = np.argsort(hk, kind="stable")
    cells = (ix * r + iy)[srt]
    base = grid.counts[ix, iy][srt]
    approx = KernelApprox(grid, cells, base, base.copy())
    N = base.sum()
    rng = np.random.default_rng([seed, 3])
    while approx.size > min_size:
        accepted = None
        for _ in range(max_retries):
            new, padded = halve_counts(approx.counts, rng)
            diff = approx.dense(new / new.sum() - base / N)
            err = float(np.max(np.abs(_grid_counts(summed_area(diff), probes, r))))
            if err <= budget:
                accepted = (new, padded, err)
                break
        if accepted is None:
            break
        approx.counts, padded, approx.halving_error = accepted
        approx.halvings += 1
        approx.padded += int(padded)
    keep = approx.counts > 0
    approx.cells, approx.base, approx.counts = approx.cells[keep], approx.base[keep], approx.counts[keep]
    return approx


# -- merge-reduce forest ------------------------------------------------------------

def split_budget(budget, max_points, first_rank=0):
    """Per-rank budgets for trees over up to ``max_points`` leaves plus a final share.

    Ranks below ``first_rank`` never exceed the node size and get nothing;
    the remaining ranks and the final equalization share ``budget`` evenly.
    """
    top = max(0, int(math.floor(math.log2(max(max_points, 1)))))
    active = max(top - first_rank + 1, 0)
    share = budget / (active + 1)
    return [share if k >= first_rank else 0.0 for k in range(top + 1)], share


class _Node:
    __slots__ = ("rank", "ids", "counts", "halvings", "children", "error", "serial")

    def __init__(self, rank, ids, counts, halvings, children=(), error=0.0, serial=0):
        self.rank = rank
        self.ids = ids
        self.counts = counts
        self.halvings = halvings
        self.children = tuple(children)
        self.error = error
        self.serial = serial

    @property
    def size(self):
        return int(self.counts.sum())


class DynamicCoresetStore:
    """Binary-decomposition forest of merge-reduce trees over the input points.

    Every tree has ``2**rank`` leaves and ranks are distinct, so the tree
    sizes spell ``n`` in binary.  A node holds one multiplicity row per input
    point; rows are copies of the shared kernel sample, halved independently.
    """

    def __init__(self, approx, probes, node_size, budget, max_points, seed=0, epsilon_cor=None):
        self.approx = approx
        self.probes = probes
        self.node_size = int(node_size)
        self.budget = budget
        self.epsilon_cor = epsilon_cor if epsilon_cor is not None else 3 * budget
        first = int(math.floor(math.log2(max(self.node_size / max(approx.size, 1), 1)))) + 1
        self.level_budgets, self.final_budget = split_budget(budget, max_points, first)
        self.seed = seed
        self.points = {}
        self.trees = {}
        self._probe_pos = {}
        self._serial = 0
        self._dense_offsets = approx.cell_offsets
        self.stage_errors = []
        self.failed_halvings = 0

    # bookkeeping
    def __len__(self):
        return len(self.points)

    def ranks(self):
        return sorted(self.trees)

    def insert(self, point):
        if point.id in self.points:
            raise ValueError(f"point {point.id} already present")
        self.points[point.id] = point
        self._probe_pos[point.id] = point.positions(self.probes.times)
        leaf = _Node(0, [point.id], self.approx.counts[None, :].astype(np.int64), np.zeros(1, dtype=np.int64),
                     serial=self._next_serial())
        self._reduce(leaf)
        self._carry(leaf)

    def delete(self, point_id):
        if point_id not in self.points:
            raise KeyError(f"unknown point id {point_id}")
        root = next(t for t in self.trees.values() if point_id in t.ids)
        del self.trees[root.rank]
        node, loose = root, []
        while node.rank > 0:
            a, b = node.children
            if point_id in a.ids:
                loose.append(b)
                node = a
            else:
                loose.append(a)
                node = b
        del self.points[point_id]
        del self._probe_pos[point_id]
        for sub in sorted(loose, key=lambda s: s.rank):
            self._carry(sub)

    def update(self, point_id, new_point):
        self.delete(point_id)
        self.insert(new_point)

    def _next_serial(self):
        self._serial += 1
        return self._serial

    def _carry(self, node):
        while node.rank in self.trees:
            other = self.trees.pop(node.rank)
            a, b = (other, node) if min(other.ids) < min(node.ids) else (node, other)
            merged = _Node(node.rank + 1, a.ids + b.ids, np.vstack([a.counts, b.counts]),
                           np.concatenate([a.halvings, b.halvings]), (a, b), serial=self._next_serial())
            self._reduce(merged)
            node = merged
        self.trees[node.rank] = node

    # halving of rows
    def _row_shift(self, pid):
        return self._probe_pos[pid]

    def _rows_discrepancy(self, ids, old, new, weight):
        """Max over probes of |weight * sum_i (new_i / |new_i| - old_i / |old_i|)|."""
        r = self.approx.grid.r
        h = 2.0 / r
        total = np.zeros(len(self.probes))
        rects = self.probes.rects
        for pid, o, n_ in zip(ids, old, new):
            diff = n_ / n_.sum() - o / o.sum()
            if not np.any(diff):
                continue
            S = summed_area(self.approx.dense(diff))
            shift = self._row_shift(pid)
            near = ((rects[:, 2] > shift[:, 0] - 1) & (rects[:, 0] < shift[:, 0] + 1)
                    & (rects[:, 3] > shift[:, 1] - 1) & (rects[:, 1] < shift[:, 1] + 1))
            k = np.flatnonzero(near)
            if len(k) == 0:
                continue
            rr, sh = rects[k], shift[k]
            i0, i1 = grid_index_range(rr[:, 0] - sh[:, 0], rr[:, 2] - sh[:, 0], -1.0, h, r)
            j0, j1 = grid_index_range(rr[:, 1] - sh[:, 1], rr[:, 3] - sh[:, 1], -1.0, h, r)
            total[k] += S[i1, j1] - S[i0, j1] - S[i1, j0] + S[i0, j0]
        return float(np.max(np.abs(weight * total))) if len(total) else 0.0

    def _try_halve(self, node, rows, budget, weight, rng):
        ids = [node.ids[i] for i in rows]
        old = node.counts[rows]
        best = None
        for attempt in range(MAX_RETRIES):
            new = np.empty_like(old)
            for k in range(len(rows)):
                new[k], _pad = halve_counts(old[k], rng)
            disc = self._rows_discrepancy(ids, old, new, weight)
            if best is None or disc < best[0]:
                best = (disc, new)
            if disc <= budget:
                return new, disc, True
            if attempt + 1 >= EARLY_ABORT and best[0] > HOPELESS * budget:
                break
        return best[1], best[0], False

    def _reduce(self, node):
        """Halve lagging rows while the node exceeds the size target and the
        level budget holds."""
        rng = np.random.default_rng([self.seed, node.serial])
        budget = self.level_budgets[min(node.rank, len(self.level_budgets) - 1)]
        while node.size > self.node_size and budget > 0:
            h_min = node.halvings.min()
            rows = np.flatnonzero(node.halvings == h_min)
            if node.counts[rows].sum(axis=1).min() <= 1:
                break
            new, disc, ok = self._try_halve(node, rows, budget, 1.0 / len(node.ids), rng)
            if not ok:
                self.failed_halvings += 1
                break
            node.counts = node.counts.copy()
            node.counts[rows] = new
            node.halvings = node.halvings.copy()
            node.halvings[rows] += 1
            node.error += disc
            budget -= disc

    def coreset_rows(self):
        """Rows of all roots, equalized so every point carries the same count."""
        ids, rows, halv = [], [], []
        for rank in sorted(self.trees):
            t = self.trees[rank]
            ids += t.ids
            rows.append(t.counts)
            halv.append(t.halvings)
        counts = np.vstack(rows)
        halv = np.concatenate(halv)
        rng = np.random.default_rng([self.seed, 0, len(ids)])
        budget = self.final_budget
        final_error, met = 0.0, True
        target = halv.max()
        weight = 1.0 / len(ids)
        holder = _Node(-1, ids, counts, halv)
        while holder.halvings.min() < target:
            h_min = holder.halvings.min()
            rows_i = np.flatnonzero(holder.halvings == h_min)
            new, disc, ok = self._try_halve(holder, rows_i, budget, weight, rng)
            met = met and ok
            holder.counts = holder.counts.copy()
            holder.counts[rows_i] = new
            holder.halvings = holder.halvings.copy()
            holder.halvings[rows_i] += 1
            final_error += disc
            budget = max(budget - disc, 0.0)
        sizes = holder.counts.sum(axis=1)
        if len(set(sizes.tolist())) > 1:
            # odd sizes can differ by padding; top up the smaller rows by duplication
            m = sizes.max()
            for i in np.flatnonzero(sizes < m):
                nz = np.flatnonzero(holder.counts[i])
                holder.counts[i, nz[-1]] += m - sizes[i]
        return ids, holder.counts, final_error, met

    def merge_error_bound(self):
        """Sum over levels of the largest node budget consumed at that level."""
        per_level = {}

        def walk(n):
            per_level[n.rank] = max(per_level.get(n.rank, 0.0), n.error)
            for c in n.children:
                walk(c)

        for t in self.trees.values():
            walk(t)
        return sum(per_level.values())


# -- coreset ------------------------------------------------------------------------

@dataclass
class Coreset:
    """Moving sample points; sample ``i`` follows ``points[source[i]]`` displaced by ``offsets[i]``."""

    points: list
    source: np.ndarray
    offsets: np.ndarray
    epsilon_cor: float
    seed: int = 0
    probe_family_digest: str = ""
    report: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.source)

    def positions(self, t):
        return positions_at(self.points, t)[self.source] + self.offsets

    def velocities(self, t):
        return velocities_at(self.points, t)[self.source]

    @property
    def source_map(self):
        return [(self.points[s].id, tuple(o)) for s, o in zip(self.source, self.offsets)]

    @property
    def samples(self):
        out = []
        for i, (s, o) in enumerate(zip(self.source, self.offsets)):
            p = self.points[s]
            segs = [Segment(g.t, g.x + o[0], g.y + o[1], g.vx, g.vy) for g in p.segments]
            out.append(MovingPoint(i, segs))
        return out

    def to_dict(self, t=0.0):
        P = self.positions(t)
        V = self.velocities(t)
        return {
            "epsilon_cor": self.epsilon_cor,
            "seed": self.seed,
            "probe_family_digest": self.probe_family_digest,
            "samples": [
                {"id": i, "source_id": int(self.points[s].id), "x0": float(p[0]), "y0": float(p[1]),
                 "vx": float(v[0]), "vy": float(v[1])}
                for i, (s, p, v) in enumerate(zip(self.source, P, V))
            ],
            "report": self.report,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def coreset_from_dict(d, points):
    """Rebuild a :class:`Coreset` against its source ``points``."""
    index = {p.id: i for i, p in enumerate(points)}
    P0 = positions_at(points, 0.0)
    src, off = [], []
    for s in d["samples"]:
        if s["source_id"] not in index:
            raise ValueError(f"sample {s['id']} refers to unknown point {s['source_id']}")
        i = index[s["source_id"]]
        src.append(i)
        off.append((s["x0"] - P0[i, 0], s["y0"] - P0[i, 1]))
    return Coreset(points, np.array(src, dtype=np.int64), np.array(off, dtype=float).reshape(-1, 2),
                   d["epsilon_cor"], d.get("seed", 0), d.get("probe_family_digest", ""), d.get("report", {}))


def verify_range_error(coreset, points, kernel, probes):
    """Max over probes of |fraction of the coreset in R - volume of the KDE in R|.

    Counts samples directly at each probe time; independent of the grid
    bookkeeping used during construction.
    """
    if probes is None or len(probes) == 0:
        return 0.0
    worst = 0.0
    m = len(coreset)
    for t, idx in probes.groups():
        rects = probes.rects[idx]
        frac = count_in_rects(coreset.positions(t), rects) / m
        vol = kde_cell_volume(points, kernel, t, rects)
        worst = max(worst, float(np.max(np.abs(frac - vol))))
    return worst


def default_node_size(approx):
    # nodes stop halving below 16 copies, where copy errors no longer average out
    return max(NODE_COPIES * approx.size, 2)


def build_coreset(points, kernel, epsilon_cor, horizon, D=None, rho=None, seed=0,
                  max_resolution=2048, node_size=None, n_random=10_000, kernel_probes=20_000,
                  return_store=False):
    """Coreset whose range fractions track KDE volumes within ``epsilon_cor``.

    The budget is split in three equal parts: grid sampling, reducing the
    shared kernel sample, and merge-reduce over the input points (spread
    evenly over the tree levels and a final equalization step).
    """
    if isinstance(kernel, str):
        kernel = make_kernel(kernel)
    points = list(points)
    if not points:
        raise ValueError("no input points")
    third = epsilon_cor / 3.0
    kprobes = kernel_probe_rects(kernel_probes, seed=seed)
    grid, samp_err, samp_met = choose_resolution(kernel, third, kprobes, max_resolution=max_resolution)
    approx = reduce_kernel_sample(grid, third, kprobes, seed=seed)
    approx.sampling_error = samp_err
    if D is None:
        D = float(np.ceil(np.max(np.abs(positions_at(points, 0.0))) + 1))
    probes = make_probe_family(points, D, horizon, rho=rho, seed=seed, n_random=n_random,
                               anchor_offsets=approx.cell_offsets)
    node_size = default_node_size(approx) if node_size is None else node_size
    store = DynamicCoresetStore(approx, probes, node_size, third, len(points), seed=seed,
                                epsilon_cor=epsilon_cor)
    for p in points:
        store.insert(p)
    coreset = coreset_from_store(store, epsilon_cor, seed)
    coreset.report.update({
        "resolution": grid.r,
        "grid_size": grid.size,
        "sampling_error": samp_err,
        "sampling_bound": 36.0 / grid.r,
        "sampling_target_met": bool(samp_met),
        "kernel_halvings": approx.halvings,
        "kernel_sample_size": approx.size,
        "kernel_halving_error": approx.halving_error,
        "node_size": int(node_size),
        "probe_count": len(probes),
    })
    if return_store:
        return coreset, store
    return coreset


def coreset_from_store(store, epsilon_cor, seed=0):
    ids, counts, final_err, final_met = store.coreset_rows()
    points = [store.points[pid] for pid in ids]
    offs = store.approx.cell_offsets
    rows, cols = np.nonzero(counts)
    rep = counts[rows, cols]
    source = np.repeat(rows, rep)
    offsets = np.repeat(offs[cols], rep, axis=0)
    approx = store.approx
    merge_err = store.merge_error_bound() + final_err
    report = {
        "size": int(len(source)),
        "size_bound": size_bound(epsilon_cor),
        "size_constant": SIZE_CONSTANT,
        "merge_error": merge_err,
        "final_equalize_met": bool(final_met),
        "failed_halvings": store.failed_halvings,
        "tree_ranks": store.ranks(),
        "copy_halvings": int(store.trees[max(store.trees)].halvings.max()) if store.trees else 0,
        "stage_bound": approx.sampling_error + approx.halving_error + merge_err,
    }
    return Coreset(points, source, offsets, epsilon_cor, seed, store.probes.digest, report)


def update_trajectory(store, point_id, new_segments, epsilon_cor=None):
    """Replace one point's trajectory by a deletion and an insertion in ``store``."""
    if point_id not in store.points:
        raise KeyError(f"unknown point id {point_id}")
    old = store.points[point_id]
    t0 = new_segments[0].t if isinstance(new_segments[0], Segment) else new_segments[0][0]
    new_point = old.with_segments_from(t0, new_segments)
    store.update(point_id, new_point)
    eps = epsilon_cor if epsilon_cor is not None else store.epsilon_cor
    return coreset_from_store(store, eps, store.seed)
