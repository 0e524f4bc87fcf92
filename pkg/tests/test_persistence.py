import csv
import itertools

import numpy as np
import pytest

from kinetic_kde import scenario, wquadtree as wq
from kinetic_kde.coreset import build_coreset, choose_parameters
from kinetic_kde.persistence import CellComplex, PersistenceDiagram, bottleneck_distance, bottleneck_matching, \
    check_injection, maxima_persistence, persistent_maxima


def diagram_set(d):
    return sorted((round(b, 12), round(x, 12), bool(e)) for (b, x), e in zip(d.pairs.tolist(), d.essential))


def minimax_oracle(h, adj):
    """Pairs from widest-path bottlenecks: a birth cell dies at the lowest
    sweep rank needed to reach any cell born before it."""
    n = len(h)
    order = sorted(range(n), key=lambda i: (-h[i], i))
    rank = {c: r for r, c in enumerate(order)}
    B = np.full((n, n), np.inf)
    for i in range(n):
        B[i, i] = rank[i]
        for j in adj[i]:
            B[i, j] = max(rank[i], rank[j])
    for k in range(n):
        B = np.minimum(B, np.maximum(B[:, k : k + 1], B[k : k + 1, :]))
    gmin = min(h)
    out = []
    for c in range(n):
        if any(rank[j] < rank[c] for j in adj[c]):
            continue
        older = [B[c, d] for d in range(n) if rank[d] < rank[c] and np.isfinite(B[c, d])]
        if older:
            death = h[order[int(min(older))]]
            if h[c] > death:
                out.append((round(h[c], 12), round(death, 12), False))
        else:
            out.append((round(h[c], 12), round(gmin, 12), True))
    return sorted(out)


def random_complex(rng, n):
    """Connected random graph with tied heights."""
    adj = [set() for _ in range(n)]
    for i in range(1, n):
        j = int(rng.integers(0, i))
        adj[i].add(j)
        adj[j].add(i)
    for _ in range(n):
        i, j = rng.integers(0, n, 2)
        if i != j:
            adj[i].add(int(j))
            adj[j].add(int(i))
    h = rng.integers(0, 6, n) / 5.0
    return h.tolist(), [sorted(a) for a in adj]


def test_path_examples():
    d = maxima_persistence(CellComplex.path([1.0, 0.2, 0.8]))
    assert diagram_set(d) == [(0.8, 0.2, False), (1.0, 0.2, True)]
    assert sorted(d.persistence) == pytest.approx([0.6, 0.8])
    d = maxima_persistence(CellComplex.path([0.3] * 5))
    assert diagram_set(d) == [(0.3, 0.3, True)]
    d = maxima_persistence(CellComplex.path([1.0, 0.5, 1.0]))
    assert diagram_set(d) == [(1.0, 0.5, False), (1.0, 0.5, True)]
    assert d.cells[d.essential][0] == 0  # lower index wins the tie
    assert len(maxima_persistence(CellComplex.path([])).pairs) == 0


def test_keep_zero_pairs():
    d = maxima_persistence(CellComplex.path([1.0, 0.5, 0.5, 0.7]), keep_zero=True)
    assert (0.7, 0.5) in [tuple(p) for p in d.pairs.tolist()]


@pytest.mark.parametrize("seed", range(40))
def test_union_find_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    h, adj = random_complex(rng, int(rng.integers(2, 65)))
    assert diagram_set(maxima_persistence(CellComplex.from_lists(h, adj))) == minimax_oracle(h, adj)


@pytest.mark.parametrize("seed", range(5))
def test_raster_matches_exhaustive_oracle(seed):
    g = np.random.default_rng(seed).integers(0, 4, (8, 8)) / 3.0
    cx = CellComplex.from_raster(g)
    adj = [cx.neighbors(i).tolist() for i in range(len(cx))]
    assert diagram_set(maxima_persistence(cx)) == minimax_oracle(g.ravel().tolist(), adj)


def _strict_plateaus(h, adj):
    n, seen, count = len(h), set(), 0
    for s in range(n):
        if s in seen:
            continue
        comp, stack = {s}, [s]
        while stack:
            c = stack.pop()
            for j in adj[c]:
                if h[j] == h[s] and j not in comp:
                    comp.add(j)
                    stack.append(j)
        seen |= comp
        if all(h[j] < h[s] for c in comp for j in adj[c] if j not in comp):
            count += 1
    return count


@pytest.mark.parametrize("seed", range(20))
def test_births_count_plateau_maxima(seed):
    rng = np.random.default_rng(100 + seed)
    h, adj = random_complex(rng, 50)
    assert len(maxima_persistence(CellComplex.from_lists(h, adj))) == _strict_plateaus(h, adj)


def test_raster_adjacency():
    cx = CellComplex.from_raster(np.zeros((4, 5)))
    deg = np.diff(cx.indptr).reshape(4, 5)
    assert deg[0, 0] == 3 and deg[0, 2] == 5 and deg[2, 2] == 8
    pairs = {(i, int(j)) for i in range(len(cx)) for j in cx.neighbors(i)}
    assert all((j, i) in pairs for i, j in pairs)


def test_tree_complex_adjacency():
    P = np.random.default_rng(0).uniform(2, 6, (100, 2))
    tree = wq.build(P, 0.0, 0.02, 8.0)
    cx, leaves = CellComplex.from_tree(tree)
    for i, v in enumerate(leaves):
        assert {leaves[j].key for j in cx.neighbors(i)} == {w.key for w in tree.leaf_neighbors(v)}
        assert cx.heights[i] == tree.height(v)


def test_persistent_maxima_examples():
    d = maxima_persistence(CellComplex.path([1.0, 0.2, 0.8]))
    assert len(persistent_maxima(d, 0.0)) == 2
    assert sorted(persistent_maxima(d, 0.5)) == [(0.8, 0.2), (1.0, 0.2)]
    assert persistent_maxima(d, 0.7) == [(1.0, 0.2)]
    assert persistent_maxima(d, 2.0) == []
    with pytest.raises(ValueError):
        persistent_maxima(d, -0.1)


def test_bottleneck_examples():
    a = PersistenceDiagram.from_pairs([[1.0, 0.0]])
    assert bottleneck_distance(a, a) == 0.0
    assert bottleneck_distance(a, PersistenceDiagram.from_pairs([])) == pytest.approx(0.5)
    assert bottleneck_distance(a, PersistenceDiagram.from_pairs([[0.9, 0.1]])) == pytest.approx(0.1)
    e = PersistenceDiagram.from_pairs([])
    assert bottleneck_distance(e, e) == 0.0


def exhaustive_bottleneck(A, B):
    """Minimum over all partial matchings; unmatched points go to the diagonal."""
    A, B = [tuple(p) for p in A], [tuple(p) for p in B]
    best = np.inf
    for j in range(min(len(A), len(B)) + 1):
        for ia in itertools.combinations(range(len(A)), j):
            for ib in itertools.permutations(range(len(B)), j):
                cost = 0.0
                for a, b in zip(ia, ib):
                    cost = max(cost, abs(A[a][0] - B[b][0]), abs(A[a][1] - B[b][1]))
                for a in set(range(len(A))) - set(ia):
                    cost = max(cost, (A[a][0] - A[a][1]) / 2)
                for b in set(range(len(B))) - set(ib):
                    cost = max(cost, (B[b][0] - B[b][1]) / 2)
                best = min(best, cost)
    return best


def random_diagram(rng, k):
    d = rng.uniform(0, 1, k)
    return np.stack([d + rng.uniform(0, 1, k), d], axis=1)


@pytest.mark.parametrize("seed", range(30))
def test_bottleneck_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    A, B = random_diagram(rng, rng.integers(0, 7)), random_diagram(rng, rng.integers(0, 7))
    dist, match = bottleneck_matching(PersistenceDiagram.from_pairs(A), PersistenceDiagram.from_pairs(B))
    assert dist == pytest.approx(exhaustive_bottleneck(A, B), abs=1e-12)
    used = [j for j in match if j >= 0]
    assert len(used) == len(set(used))
    for i, j in enumerate(match):
        cost = np.abs(A[i] - B[j]).max() if j >= 0 else (A[i, 0] - A[i, 1]) / 2
        assert cost <= dist + 1e-12


def test_bottleneck_is_a_metric():
    rng = np.random.default_rng(7)
    ds = [PersistenceDiagram.from_pairs(random_diagram(rng, rng.integers(0, 8))) for _ in range(8)]
    for a, b, c in itertools.product(ds, repeat=3):
        ab = bottleneck_distance(a, b)
        assert ab == bottleneck_distance(b, a)
        assert ab <= bottleneck_distance(a, c) + bottleneck_distance(c, b) + 1e-9


@pytest.mark.parametrize("seed", range(100))
def test_stability_under_perturbation(seed):
    rng = np.random.default_rng(1000 + seed)
    g = rng.uniform(0, 1, (10, 10))
    delta = rng.uniform(0.001, 0.3)
    noise = rng.uniform(-delta, delta, g.shape)
    d1 = maxima_persistence(CellComplex.from_raster(g))
    d2 = maxima_persistence(CellComplex.from_raster(g + noise))
    assert bottleneck_distance(d1, d2) <= np.abs(noise).max() + 1e-9


def test_injection_identity_and_offset():
    g = np.random.default_rng(3).uniform(0, 1, (12, 12))
    f = CellComplex.from_raster(g)
    rep = check_injection(f, f, 0.1)
    assert rep.ok and rep.bottleneck == 0.0
    assert all(a == b for a, b in rep.matches)
    rep = check_injection(f, CellComplex.from_raster(g + 0.03), 0.1)
    assert rep.ok and rep.bottleneck == pytest.approx(0.03) and rep.gap == pytest.approx(0.03)
    bad = check_injection(f, CellComplex.from_raster(g + 0.2), 0.1)
    assert not bad.ok and "gap" in bad.message
    with pytest.raises(ValueError):
        check_injection(f, CellComplex.from_raster(g[:5]), 0.1)


def test_injection_reports_lost_peak():
    g = np.zeros((9, 9))
    g[2, 2], g[6, 6] = 1.0, 0.9
    h = g.copy()
    h[6, 6] = 0.0
    rep = check_injection(CellComplex.from_raster(g), CellComplex.from_raster(h), 0.4)
    assert not rep.ok and len(rep.unmatched) >= 1


def test_two_cluster_kde_against_tree_raster():
    sc = scenario.reference_scenario()
    eps = sc.epsilon
    rho, _, _ = choose_parameters(eps, sc.kernel.lipschitz)
    Q = build_coreset(sc.points, sc.kernel, 0.04, sc.T, D=sc.D, rho=rho)
    tree = wq.build(Q, 0.5, rho, sc.D)
    R = scenario.rasterize(sc, 0.5, 128)
    rep = check_injection(CellComplex.from_raster(R.heights), CellComplex.from_raster(wq.rasterize(tree, 128)), eps)
    assert rep.ok, rep.message


def test_diagram_csv(tmp_path):
    d = maxima_persistence(CellComplex.path([1.0, 0.2, 0.8]))
    d.to_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["birth", "death", "persistence", "essential"]
    assert len(rows) == 3 and {r[3] for r in rows[1:]} == {"0", "1"}
