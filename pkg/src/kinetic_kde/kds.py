"""Kinetic maintenance of the weight-based quadtree as coreset samples move."""

from __future__ import annotations

import csv
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .coreset import update_trajectory
from .motion import MovingPoint, Segment
from .wquadtree import build, key_str

INF = math.inf
CORNER_TOL = 1e-12


class DomainExit(RuntimeError):
    pass


class IndexedHeap:
    """Binary min-heap over items ``0..n-1`` keyed by ``(key[i], i)``."""

    def __init__(self, keys):
        self.key = list(map(float, keys))
        n = len(self.key)
        self.heap = sorted(range(n), key=lambda i: (self.key[i], i))
        self.pos = [0] * n
        for p, i in enumerate(self.heap):
            self.pos[i] = p

    def __len__(self):
        return len(self.heap)

    def _less(self, a, b):
        ka, kb = self.key[a], self.key[b]
        return ka < kb or (ka == kb and a < b)

    def _swap(self, p, q):
        h = self.heap
        h[p], h[q] = h[q], h[p]
        self.pos[h[p]] = p
        self.pos[h[q]] = q

    def top(self):
        i = self.heap[0]
        return self.key[i], i

    def update(self, i, k):
        old = self.key[i]
        self.key[i] = float(k)
        p = self.pos[i]
        h = self.heap
        if (k, i) < (old, i):
            while p > 0:
                q = (p - 1) >> 1
                if self._less(h[p], h[q]):
                    self._swap(p, q)
                    p = q
                else:
                    break
        else:
            n = len(h)
            while True:
                c = 2 * p + 1
                if c >= n:
                    break
                if c + 1 < n and self._less(h[c + 1], h[c]):
                    c += 1
                if self._less(h[c], h[p]):
                    self._swap(p, c)
                    p = c
                else:
                    break

    def check(self):
        h = self.heap
        for p in range(1, len(h)):
            assert not self._less(h[p], h[(p - 1) >> 1])
        assert all(self.heap[self.pos[i]] == i for i in range(len(h)))


@dataclass
class Metrics:
    events_processed: int = 0
    splits: int = 0
    merges: int = 0
    certificate_updates: int = 0
    max_queue_size: int = 0
    per_event_node_touches: list = field(default_factory=list)
    flight_plan_updates: int = 0
    update_seconds: list = field(default_factory=list)

    def summary(self, depth=None):
        t = self.per_event_node_touches
        out = {
            "events_processed": self.events_processed,
            "splits": self.splits,
            "merges": self.merges,
            "certificate_updates": self.certificate_updates,
            "max_queue_size": self.max_queue_size,
            "max_node_touches": max(t) if t else 0,
            "mean_node_touches": float(np.mean(t)) if t else 0.0,
            "flight_plan_updates": self.flight_plan_updates,
            "update_seconds": list(self.update_seconds),
        }
        if depth:
            out["touches_per_depth"] = out["max_node_touches"] / depth
        return out


@dataclass
class EventRecord:
    time: float
    sample_id: int
    from_leaf: str
    to_leaf: str
    splits: int
    merges: int
    flags_changed: int


@dataclass
class EventLog:
    records: list = field(default_factory=list)
    maxima: list = field(default_factory=list)  # (time, frozenset of leaf keys)
    t0: float = 0.0
    t_end: float = 0.0
    finest: int = 0
    D: float = 1.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
            w.writerow(["time", "sample_id", "from_leaf", "to_leaf", "splits", "merges", "flags_changed"])
            for r in self.records:
                w.writerow([repr(float(r.time)), r.sample_id, r.from_leaf, r.to_leaf, r.splits, r.merges,
                            r.flags_changed])


class KdsState:
    """Quadtree plus one exit certificate per coreset sample."""

    def __init__(self, coreset, rho, D, t0=0.0, epsilon=None, store=None):
        self.coreset = coreset
        self.rho = rho
        self.D = float(D)
        self.epsilon = epsilon
        self.store = store
        self.now = float(t0)
        self.metrics = Metrics()
        self.log = EventLog(t0=self.now, t_end=self.now)
        self._rebuild()
        self.log.finest = self.tree.F
        self.log.D = self.D
        self._record_maxima(force=True)

    # motion ------------------------------------------------------------------
    def _load_motion(self):
        self.X = self.coreset.positions(self.now)
        self.V = self.coreset.velocities(self.now)
        self.tref = self.now
        self.breaks = sorted({(b, p.id) for p in self.coreset.points for b in p.breakpoints() if b > self.now})

    def position(self, i, t):
        return self.X[i] + self.V[i] * (t - self.tref)

    def _rebuild(self):
        self.tree = build(self.coreset, self.now, self.rho, self.D)
        self._load_motion()
        self.heap = IndexedHeap(self._fail_times(np.arange(len(self.coreset))))
        self.metrics.max_queue_size = max(self.metrics.max_queue_size, len(self.heap))
        self._persistent = self._persistent_set()

    def _leaf_boxes(self, ids):
        tree = self.tree
        keys = [tree.leaf_of[i] for i in ids]
        lv = np.array([k[0] for k in keys], dtype=float)
        s = self.D / 2.0**lv
        ix = np.array([k[1] for k in keys], dtype=float)
        iy = np.array([k[2] for k in keys], dtype=float)
        return ix * s, iy * s, (ix + 1) * s, (iy + 1) * s

    def _fail_times(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            return np.zeros(0)
        x0, y0, x1, y1 = self._leaf_boxes(ids)
        P = self.X[ids] + self.V[ids] * (self.now - self.tref)
        vx, vy = self.V[ids, 0], self.V[ids, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(vx > 0, (x1 - P[:, 0]) / vx, np.where(vx < 0, (x0 - P[:, 0]) / vx, INF))
            ty = np.where(vy > 0, (y1 - P[:, 1]) / vy, np.where(vy < 0, (y0 - P[:, 1]) / vy, INF))
        dt = np.maximum(np.minimum(tx, ty), 0.0)
        return self.now + dt

    def _reissue(self, ids):
        ids = list(ids)
        if not ids:
            return
        ft = self._fail_times(ids)
        for i, t in zip(ids, ft.tolist()):
            self.heap.update(i, t)
        self.metrics.certificate_updates += len(ids)

    # maxima bookkeeping ---------------------------------------------------------
    def _persistent_set(self):
        eps = self.epsilon
        return frozenset(v.key for v in self.tree.flagged(eps))

    def _record_maxima(self, force=False):
        cur = self._persistent
        if force or not self.log.maxima or self.log.maxima[-1][1] != cur:
            self.log.maxima.append((self.now, cur))

    # event handling ---------------------------------------------------------------
    def _new_coords(self, q, t, leaf):
        tree = self.tree
        bx0, by0, bx1, by1 = tree.box(leaf)
        s = self.D / 2.0**leaf.level
        lo = np.array([leaf.ix * s, leaf.iy * s])
        hi = lo + s
        p = self.position(q, t)
        v = self.V[q]
        sF = self.D / 2.0**tree.F
        c = np.floor(p / sF).astype(np.int64)
        out = [min(max(int(c[0]), bx0), bx1 - 1), min(max(int(c[1]), by0), by1 - 1)]
        exits = []
        for ax, (b0, b1) in enumerate(((bx0, bx1), (by0, by1))):
            if v[ax] > 0:
                te = self.tref + (hi[ax] - self.X[q, ax]) / v[ax]
            elif v[ax] < 0:
                te = self.tref + (lo[ax] - self.X[q, ax]) / v[ax]
            else:
                continue
            exits.append((te, ax, b0 - 1 if v[ax] < 0 else b1))
        first = min(e[0] for e in exits)
        for te, ax, val in exits:
            if te <= first + CORNER_TOL * max(1.0, abs(first)):
                out[ax] = val
        n = 1 << tree.F
        if not (0 <= out[0] < n and 0 <= out[1] < n):
            src = self.coreset.points[self.coreset.source[q]].id
            raise DomainExit(f"sample {q} (point {src}) leaves the domain [0, {self.D}]^2 at t={t!r}")
        return out

    def _process(self, q, t):
        tree = self.tree
        touches = 0
        v = tree.nodes[tree.leaf_of[q]]
        cx, cy = self._new_coords(q, t, v)
        u0 = tree.locate(cx, cy)
        affected_nodes = {v, u0}
        # counts along both root paths
        k = v.key
        while k is not None:
            tree.nodes[k].count -= 1
            k = tree.parent_key(k)
            touches += 1
        k = u0.key
        while k is not None:
            tree.nodes[k].count += 1
            k = tree.parent_key(k)
            touches += 1
        v.points.discard(q)
        u0.points.add(q)
        tree.leaf_of[q] = u0.key
        tree.coords[q] = (cx, cy)
        reissue = {q}
        flag_scope = set()
        # merge upward from the old leaf
        merges = 0
        pk = tree.parent_key(v.key)
        while pk is not None:
            p = tree.nodes[pk]
            if tree.splittable(p):
                break
            for c in tree.children(p):
                flag_scope |= c.M
                touches += 1 + len(c.M)
            tree.merge(p)
            merges += 1
            affected_nodes.add(p)
            reissue |= p.points
            pk = tree.parent_key(pk)
        affected_nodes = {a for a in affected_nodes if a.key in tree.nodes and tree.nodes[a.key] is a}
        # split downward at the new leaf
        splits = 0
        u = tree.nodes[tree.leaf_of[q]]
        stack = [u]
        while stack:
            w = stack.pop()
            if not (w.leaf and tree.splittable(w)):
                continue
            coords = self._fresh_coords(w, t, q)
            kids = tree.split(w, coords)
            splits += 1
            touches += 5 + sum(len(c.M) for c in kids)
            affected_nodes.add(w)
            affected_nodes.update(kids)
            reissue |= set().union(*(c.points for c in kids))
            stack.extend(kids)
        # flags
        for a in affected_nodes:
            flag_scope.add(a)
            flag_scope |= a.M
        changed = 0
        pers = set(self._persistent)
        for w in flag_scope:
            if w.key not in tree.nodes or tree.nodes[w.key] is not w:
                pers.discard(w.key)
                continue
            f = tree.evaluate_flag(w)
            if f != w.flag:
                changed += 1
                w.flag = f
            touches += 1
            if w.leaf and w.flag and (self.epsilon is None or tree.height(w) >= self.epsilon):
                pers.add(w.key)
            else:
                pers.discard(w.key)
        self._persistent = frozenset(pers)
        self._reissue(reissue)
        m = self.metrics
        m.events_processed += 1
        m.splits += splits
        m.merges += merges
        m.per_event_node_touches.append(touches)
        self.log.records.append(EventRecord(t, q, key_str(v.key), key_str(tree.leaf_of[q]), splits, merges, changed))
        self._record_maxima()

    def _fresh_coords(self, w, t, q):
        """Finest coordinates at time ``t`` of the samples in leaf ``w``, clamped into ``w``."""
        tree = self.tree
        ids = np.fromiter(w.points, dtype=np.int64)
        if len(ids) == 0:
            return {}
        P = self.X[ids] + self.V[ids] * (t - self.tref)
        sF = self.D / 2.0**tree.F
        c = np.floor(P / sF).astype(np.int64)
        bx0, by0, bx1, by1 = tree.box(w)
        c[:, 0] = np.clip(c[:, 0], bx0, bx1 - 1)
        c[:, 1] = np.clip(c[:, 1], by0, by1 - 1)
        out = {int(i): (int(a), int(b)) for i, (a, b) in zip(ids, c)}
        if q in out:
            out[q] = tuple(int(x) for x in tree.coords[q])
        return out

    # public ----------------------------------------------------------------------
    def next_event_time(self):
        t_ev = self.heap.top()[0] if len(self.heap) else INF
        t_br = self.breaks[0][0] if self.breaks else INF
        return min(t_ev, t_br)

    def advance(self, t_end):
        if t_end < self.now:
            raise ValueError("cannot advance backwards")
        while True:
            t_ev, q = self.heap.top() if len(self.heap) else (INF, -1)
            t_br = self.breaks[0][0] if self.breaks else INF
            if min(t_ev, t_br) > t_end:
                break
            if t_br <= t_ev:
                _, pid = self.breaks.pop(0)
                p = next(pp for pp in self.coreset.points if pp.id == pid)
                self.now = t_br
                segs = [s for s in p.segments if s.t >= t_br]
                self.flight_plan_update(pid, segs)
                continue
            self.now = t_ev
            self._process(q, t_ev)
        self.now = float(t_end)
        self.log.t_end = self.now
        return self.log

    def flight_plan_update(self, point_id, new_segments):
        """Replace one point's future motion and rebuild the structure at ``now``."""
        ids = [p.id for p in self.coreset.points]
        if point_id not in ids:
            raise KeyError(f"unknown point id {point_id}")
        start = _time.perf_counter()
        segs = [s if isinstance(s, Segment) else Segment(*s) for s in new_segments]
        if not segs or abs(segs[0].t - self.now) > 1e-9 * max(1.0, abs(self.now)):
            raise ValueError("new segments must start at the current time")
        if self.store is not None:
            self.coreset = update_trajectory(self.store, point_id, segs, self.coreset.epsilon_cor)
        else:
            i = ids.index(point_id)
            self.coreset.points[i] = self.coreset.points[i].with_segments_from(segs[0].t, segs)
        self._rebuild()
        self.metrics.flight_plan_updates += 1
        self.metrics.update_seconds.append(_time.perf_counter() - start)
        self._record_maxima()
        return self


def init(coreset, rho, D, t0=0.0, epsilon=None, store=None):
    return KdsState(coreset, rho, D, t0, epsilon, store)


def advance(state, t_end):
    return state.advance(t_end)


def flight_plan_update(state, point_id, new_segments):
    return state.flight_plan_update(point_id, new_segments)


@dataclass
class AuditReport:
    ok: bool
    time: float
    divergence: str = ""


def audit(state):
    """Compare the kinetic tree with a from-scratch build at ``state.now``."""
    fresh = build(state.coreset, state.now, state.rho, state.D)
    a, b = state.tree.signature(), fresh.signature()
    if a.keys() != b.keys():
        extra = sorted(a.keys() - b.keys())
        missing = sorted(b.keys() - a.keys())
        what = f"extra nodes {extra[:3]}" if extra else f"missing nodes {missing[:3]}"
        return AuditReport(False, state.now, what)
    names = ("count", "leaf", "flag", "M", "points")
    for k in sorted(a):
        if a[k] != b[k]:
            for name, x, y in zip(names, a[k], b[k]):
                if x != y:
                    return AuditReport(False, state.now, f"node {key_str(k)}: {name} differs")
    return AuditReport(True, state.now)


# -- maxima tracks -------------------------------------------------------------------

@dataclass
class Track:
    id: int
    start: float
    end: float
    regions: list  # (time, leaf key)


def _boxes(keys, F):
    k = np.array(keys, dtype=np.int64).reshape(-1, 3)
    c = np.left_shift(1, F - k[:, 0])
    return np.stack([k[:, 1] * c, k[:, 2] * c, (k[:, 1] + 1) * c, (k[:, 2] + 1) * c], axis=1)


def _close_pairs(A, B, units):
    """Index pairs of boxes whose L-infinity gap is below ``units`` (touching boxes have gap 0)."""
    if len(A) == 0 or len(B) == 0:
        return []
    gx = np.maximum(B[None, :, 0] - A[:, None, 2], A[:, None, 0] - B[None, :, 2])
    gy = np.maximum(B[None, :, 1] - A[:, None, 3], A[:, None, 1] - B[None, :, 3])
    i, j = np.nonzero(np.maximum(np.maximum(gx, gy), 0) < units)
    return list(zip(i.tolist(), j.tolist()))


def maxima_track(log, reach=1.0):
    """Link persistently flagged leaves over time into tracks.

    Flagged leaves closer than ``reach`` (one kernel width by default) form
    one maximum; this absorbs the flat-top plateaus that sampling noise
    breaks into several flagged leaves.  A group continues the single
    track it meets at the previous change; a group meeting two or more
    tracks ends them all and starts a new track.
    """
    F = log.finest
    units = reach / (log.D / 2**F)
    tracks, active = [], {}  # active: leaf key -> track
    history = log.maxima or [(log.t0, frozenset())]
    for t, keys in history:
        new_keys = sorted(keys)
        old_keys = sorted(active)
        nodes = [("o", k) for k in old_keys] + [("n", k) for k in new_keys]
        parent = {x: x for x in nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        NB, OB = _boxes(new_keys, F), _boxes(old_keys, F)
        for i, j in _close_pairs(NB, NB, units):
            if i < j:
                parent[find(("n", new_keys[i]))] = find(("n", new_keys[j]))
        for i, j in _close_pairs(NB, OB, units):
            parent[find(("o", old_keys[j]))] = find(("n", new_keys[i]))
        groups = {}
        for x in nodes:
            groups.setdefault(find(x), []).append(x)
        next_active = {}
        for members in sorted(groups.values(), key=lambda g: min(g)):
            olds = sorted({id(active[k]): active[k] for s, k in members if s == "o"}.values(), key=lambda tr: tr.id)
            news = [k for s, k in members if s == "n"]
            if len(olds) == 1 and news:
                tr = olds[0]
                for k in news:
                    next_active[k] = tr
                    tr.regions.append((t, k))
                continue
            for tr in olds:
                tr.end = t
            if news:
                tr = Track(len(tracks), t, log.t_end, [(t, k) for k in news])
                tracks.append(tr)
                for k in news:
                    next_active[k] = tr
        active = next_active
    return tracks


def tracks_to_csv(tracks, path, D, F):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
        w.writerow(["track_id", "start", "end", "x", "y", "size", "leaf"])  # last leaf, center
        for tr in tracks:
            t, k = tr.regions[-1]
            s = D / 2**k[0]
            w.writerow([tr.id, repr(float(tr.start)), repr(float(tr.end)), repr((k[1] + 0.5) * s),
                        repr((k[2] + 0.5) * s), repr(s), key_str(k)])


def event_bound(coreset, rho, D, t0, t1):
    """Upper bound on cell crossings over ``[t0, t1]`` using a grid of side ``sqrt(rho)/2``."""
    g = math.sqrt(rho) / 2
    speed = np.abs(coreset.velocities(t0)).sum(axis=1)
    return float(np.sum(np.ceil(speed * (t1 - t0) / g) + 2))


__all__ = ["KdsState", "init", "advance", "flight_plan_update", "audit", "maxima_track", "DomainExit",
           "IndexedHeap", "Metrics", "EventLog", "Track", "tracks_to_csv", "event_bound", "MovingPoint"]
