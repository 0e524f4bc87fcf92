import csv
import heapq

import numpy as np
import pytest
from conftest import moving_coreset, static_coreset

from kinetic_kde import kds, scenario
from kinetic_kde.coreset import Coreset, build_coreset
from kinetic_kde.motion import MovingPoint, Segment
from kinetic_kde.persistence import CellComplex, maxima_persistence

QUADS = [[0.5, 0.5], [0.5, 1.5], [1.5, 0.5], [1.5, 1.5]]


def quad_state(V, t0=0.0):
    """Four samples at the quadrant centers of [0, 2]^2 with unit leaves."""
    pts = [MovingPoint.linear(i, *p, *v, t0=t0) for i, (p, v) in enumerate(zip(QUADS, V))]
    Q = Coreset(pts, np.arange(4), np.zeros((4, 2)), 0.0)
    return kds.init(Q, 0.3, 2.0, t0)


def swarm(n=200, seed=0, speed=1.0):
    rng = np.random.default_rng(seed)
    return moving_coreset(rng.uniform(3, 5, (n, 2)), rng.normal(0, speed, (n, 2)))


def step_past_next_event(S):
    """Process the next event(s) and stop halfway to the following one.

    At the event instant itself the sample sits on a cell boundary, where a
    fresh build may pick either side; halfway, membership is unambiguous.
    """
    S.advance(S.next_event_time())
    nxt = S.next_event_time()
    S.advance(S.now + min(nxt - S.now, 1.0) / 2)


def test_indexed_heap_against_heapq():
    rng = np.random.default_rng(0)
    keys = rng.uniform(0, 10, 50)
    H = kds.IndexedHeap(keys)
    for _ in range(2000):
        i = int(rng.integers(50))
        k = float(rng.choice([rng.uniform(0, 10), np.inf, keys[rng.integers(50)]]))
        keys[i] = k
        H.update(i, k)
        H.check()
        assert H.top() == heapq.nsmallest(1, ((float(v), j) for j, v in enumerate(keys)))[0]


def test_fail_time_examples():
    S = quad_state([[1, 0], [0, 0], [0, 0], [0, 0]])
    assert S.heap.key[0] == pytest.approx(0.5)
    S = quad_state([[1, 2], [0, 0], [0, 0], [0, 0]], t0=3.0)
    assert S.heap.key[0] == pytest.approx(3.25)
    assert S.heap.key[1:] == [np.inf] * 3


def test_static_samples_never_fire():
    S = kds.init(static_coreset(np.random.default_rng(1).uniform(2, 6, (50, 2))), 0.05, 8.0)
    assert all(k == np.inf for k in S.heap.key)
    before = S.tree.signature()
    S.advance(10.0)
    assert S.metrics.events_processed == 0 and S.now == 10.0
    assert S.tree.signature() == before


def test_no_events_leaves_state_unchanged():
    S = quad_state([[1, 0], [0, 0], [0, 0], [0, 0]])
    sig = S.tree.signature()
    S.advance(0.4)
    assert S.now == 0.4 and S.metrics.events_processed == 0 and S.tree.signature() == sig
    with pytest.raises(ValueError):
        S.advance(0.1)


def test_simultaneous_crossings_in_id_order():
    S = quad_state([[1, 0], [1, 0], [0, 0], [0, 0]])
    S.advance(0.6)
    assert [r.sample_id for r in S.log.records] == [0, 1]
    assert S.log.records[0].time == S.log.records[1].time == pytest.approx(0.5)
    assert kds.audit(S).ok
    # the right half now holds half the weight and was split
    assert S.metrics.splits >= 1


def test_boundary_event_moves_to_half_open_side():
    S = quad_state([[1, 0], [0, 0], [0, 0], [0, 0]])
    S.advance(0.5)
    assert S.tree.leaf_of[0][1] >= 1  # now in a cell with x >= 1
    assert kds.audit(S).ok


def test_leaving_the_domain_is_an_error():
    S = quad_state([[0, 0], [0, 0], [0, 0], [1, 0]])
    with pytest.raises(kds.DomainExit, match="sample 3"):
        S.advance(1.0)


def test_audit_after_every_event():
    Q = swarm()
    rho, D = 0.02, 8.0
    S = kds.init(Q, rho, D, epsilon=0.02)
    assert kds.audit(S).ok
    n = 0
    while n < 1000:
        step_past_next_event(S)
        n = S.metrics.events_processed
        rep = kds.audit(S)
        assert rep.ok, rep.divergence
        assert len(S.heap) == len(Q)
        assert len(S.heap.key) == len(Q)
    assert S.metrics.events_processed <= kds.event_bound(Q, rho, D, 0.0, S.now)
    depth = S.tree.depth()
    c1 = max(S.metrics.per_event_node_touches) / depth
    assert c1 <= 60  # recorded responsiveness constant


def test_corrupted_weight_is_reported():
    S = kds.init(swarm(50), 0.05, 8.0)
    leaf = sorted(S.tree.leaves(), key=lambda v: v.key)[3]
    leaf.count += 1
    rep = kds.audit(S)
    assert not rep.ok and kds.key_str(leaf.key) in rep.divergence and "count" in rep.divergence


def test_flight_plan_updates():
    Q = swarm(60, seed=2, speed=0.4)
    S = kds.init(Q, 0.03, 8.0)
    S.advance(0.3)
    p = Q.points[5]
    x, y = p.position(0.3)
    vx, vy = p.velocity(0.3)
    S.flight_plan_update(p.id, [Segment(0.3, x, y, vx, vy)])
    assert kds.audit(S).ok
    S.flight_plan_update(p.id, [Segment(0.3, x, y, -vx, -vy)])
    assert S.coreset.points[5].velocity(0.5) == (-vx, -vy)
    rng = np.random.default_rng(3)
    for t in np.sort(rng.uniform(0.3, 1.0, 10)):
        S.advance(t)
        assert kds.audit(S).ok
    assert S.metrics.flight_plan_updates == 2 and len(S.metrics.update_seconds) == 2
    with pytest.raises(KeyError):
        S.flight_plan_update(999, [Segment(S.now, 1, 1, 0, 0)])
    with pytest.raises(ValueError):
        S.flight_plan_update(p.id, [Segment(S.now + 0.5, 1, 1, 0, 0)])


def test_flight_plan_update_through_store():
    rng = np.random.default_rng(4)
    pts = [MovingPoint.linear(i, *rng.uniform(3, 5, 2), *rng.normal(0, 0.3, 2)) for i in range(6)]
    Q, store = build_coreset(pts, "pyramid", 0.1, 1.0, D=8.0, return_store=True)
    S = kds.init(Q, 0.03, 8.0, store=store)
    S.advance(0.5)
    x, y = pts[2].position(0.5)
    S.flight_plan_update(2, [Segment(0.5, x, y, 0.2, 0.2)])
    assert kds.audit(S).ok
    S.advance(1.0)
    assert kds.audit(S).ok


def test_breakpoints_become_updates():
    P = np.random.default_rng(5).uniform(3, 5, (30, 2))
    pts = [MovingPoint.linear(i, *p, 0.3, 0.0) for i, p in enumerate(P)]
    bent = pts[0].with_segments_from(0.5, [Segment(0.5, *pts[0].position(0.5), 0.0, -0.4)])
    pts[0] = bent
    S = kds.init(Coreset(pts, np.arange(30), np.zeros((30, 2)), 0.0), 0.05, 8.0)
    S.advance(1.0)
    assert S.metrics.flight_plan_updates == 1
    assert kds.audit(S).ok


def test_event_log_csv(tmp_path):
    S = quad_state([[1, 0], [1, 0], [0, 0], [0, 0]])
    S.advance(0.6)
    S.log.to_csv(tmp_path / "events.csv")
    rows = list(csv.reader(open(tmp_path / "events.csv")))
    assert rows[0] == ["time", "sample_id", "from_leaf", "to_leaf", "splits", "merges", "flags_changed"]
    assert len(rows) == 3 and float(rows[1][0]) == 0.5


def test_static_cluster_single_track():
    sc = scenario.generate({"n": 20, "clusters": 1, "speed": 0.0, "D": 8.0, "T": 1.0, "seed": 0,
                            "spread": 0.25})
    Q = build_coreset(sc.points, sc.kernel, 0.05, 1.0, D=8.0)
    S = kds.init(Q, 0.01, 8.0, epsilon=0.3)
    S.advance(1.0)
    tracks = kds.maxima_track(S.log)
    assert S.metrics.events_processed == 0
    assert len(tracks) == 1 and tracks[0].start == 0.0 and tracks[0].end == 1.0


def test_empty_horizon_tracks_are_flagged_leaves():
    Q = swarm(80, seed=6)
    S = kds.init(Q, 0.02, 8.0, epsilon=0.01)
    S.advance(0.0)
    tracks = kds.maxima_track(S.log)
    keys = {k for tr in tracks for _, k in tr.regions}
    assert keys == {v.key for v in S.tree.flagged(0.01)}
    assert all(tr.start == tr.end == 0.0 for tr in tracks)


def _raster_peaks(sc, t, threshold):
    R = scenario.rasterize(sc, t, 256)
    d = maxima_persistence(CellComplex.from_raster(R.heights))
    return int(np.sum(d.persistence > threshold))


def test_merging_clusters_end_two_tracks_and_start_one():
    sc = scenario.merge_scenario()
    Q = build_coreset(sc.points, sc.kernel, 0.05, sc.T, D=sc.D, rho=0.0296)
    S = kds.init(Q, 0.0296, sc.D, epsilon=0.2)
    S.advance(sc.T)
    tracks = kds.maxima_track(S.log)
    ended = [tr for tr in tracks if tr.end < sc.T]
    assert len(ended) == 2 and ended[0].end == ended[1].end
    t_m = ended[0].end
    assert 0.3 <= t_m <= 0.55
    assert any(tr.start == t_m and tr.end == sc.T for tr in tracks)
    assert {r.time for r in S.log.records} >= {t_m}
    # the true density has two peaks shortly before and one shortly after
    assert _raster_peaks(sc, t_m - 0.1, 0.05) == 2
    assert _raster_peaks(sc, t_m + 0.15, 0.05) == 1
