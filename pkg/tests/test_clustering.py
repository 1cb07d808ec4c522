from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtpos import clustering
from rtpos.clustering import (Cluster, ClusterConfig, MemoryMode, Strategy, cluster_candidates, connected_components,
                              pick_position, select_cluster)
from rtpos.positioning import NoPositionError, PositionCandidate


def cands(points, weights=None):
    weights = np.ones(len(points)) if weights is None else weights
    return [PositionCandidate(np.asarray(p, dtype=float), float(w)) for p, w in zip(points, weights)]


def union_find(points, d):
    """Reference partition: union-find over all pairs closer than d."""
    parent = list(range(len(points)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            if np.linalg.norm(points[i] - points[j]) < d:
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(len(points)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def partition(clusters):
    return sorted(list(c.members) for c in clusters)


def test_config_invariant():
    with pytest.raises(ValueError):
        ClusterConfig(d_cluster=0.0)


def test_two_groups():
    cl = cluster_candidates(cands([(0, 0, 0), (0.5, 0, 0), (100, 0, 0)]), ClusterConfig(1.0))
    assert [c.size for c in cl] == [2, 1]


def test_chain_is_transitive():
    pts = [(0.9 * k, 0, 0) for k in range(20)]
    assert len(cluster_candidates(cands(pts), ClusterConfig(1.0))) == 1


def test_empty_input():
    assert cluster_candidates([], ClusterConfig()) == []


@pytest.mark.parametrize("mode", list(MemoryMode))
def test_matches_union_find_200_points(mode):
    rng = np.random.default_rng(11)
    pts = rng.uniform(0, 60, (200, 3))
    got = partition(cluster_candidates(cands(pts), ClusterConfig(4.0, mode)))
    assert got == union_find(pts, 4.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60), st.floats(0.5, 10))
def test_modes_agree_and_match_oracle(seed, n, d):
    pts = np.random.default_rng(seed).uniform(0, 30, (n, 3))
    full = partition(cluster_candidates(cands(pts), ClusterConfig(d, "full")))
    stream = partition(cluster_candidates(cands(pts), ClusterConfig(d, "streaming")))
    assert full == stream == union_find(pts, d)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.5, 5), st.floats(0.1, 1.0))
def test_partition_refinement(seed, d, frac):
    pts = np.random.default_rng(seed).uniform(0, 30, (60, 3))
    coarse = connected_components(pts, d)
    label = {i: k for k, comp in enumerate(coarse) for i in comp}
    for comp in connected_components(pts, d * frac):
        assert len({label[i] for i in comp}) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 30, (50, 3))
    w = rng.uniform(0.1, 2, 50)
    perm = rng.permutation(50)
    a = cluster_candidates(cands(pts, w), ClusterConfig(4.0))
    b = cluster_candidates(cands(pts[perm], w[perm]), ClusterConfig(4.0))
    as_sets = lambda cl, idx: sorted(sorted(int(idx[m]) for m in c.members) for c in cl)
    assert as_sets(a, np.arange(50)) == as_sets(b, perm)


def test_cluster_invariants():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 40, (80, 3))
    w = rng.uniform(0.1, 2, 80)
    cl = cluster_candidates(cands(pts, w), ClusterConfig(5.0))
    for i, a in enumerate(cl):
        assert a.total_weight == pytest.approx(w[list(a.members)].sum())
        for b in cl[i + 1:]:
            d = np.linalg.norm(pts[list(a.members)][:, None] - pts[list(b.members)][None], axis=2)
            assert d.min() >= 5.0
    assert [c.total_weight for c in cl] == sorted((c.total_weight for c in cl), reverse=True)


def test_tie_order_by_smallest_member():
    cl = cluster_candidates(cands([(100, 0, 0), (0, 0, 0)]), ClusterConfig(1.0))
    assert [c.members for c in cl] == [(0,), (1,)]


def test_streaming_allocates_no_distance_table(monkeypatch):
    def forbidden(*a, **k):
        raise AssertionError("distance table built in streaming mode")

    monkeypatch.setattr(clustering, "cdist", forbidden)
    pts = np.random.default_rng(1).uniform(0, 10, (30, 3))
    assert cluster_candidates(cands(pts), ClusterConfig(2.0, "streaming"))


def test_center_and_variance():
    c = cluster_candidates(cands([(0, 0, 0), (2, 0, 0)], [1.0, 3.0]), ClusterConfig(5.0))[0]
    np.testing.assert_allclose(c.center, [1.5, 0, 0])
    assert c.variance == pytest.approx(0.25 * 1.5**2 + 0.75 * 0.5**2)


# --------------------------------------------------------------------------
# selection and position pick


def mk(points, weights):
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return Cluster(tuple(range(len(p))), p, np.asarray(weights, dtype=float))


def test_select_single():
    c = mk([(1, 1, 1)], [1.0])
    assert select_cluster([c]) is c


def test_select_heavier():
    a, b = mk([(0, 0, 0)], [5.0]), mk([(90, 0, 0)], [0.2])
    assert select_cluster([b, a]) is a


def test_many_medium_beat_one_spurious_heavy():
    true = mk([(k * 0.3, 0, 0) for k in range(10)], [0.6] * 10)
    fake = mk([(80, 0, 0)], [5.0])
    assert select_cluster([fake, true]) is true


def test_select_empty():
    with pytest.raises(NoPositionError):
        select_cluster([])


@settings(max_examples=30)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=10))
def test_selected_weight_is_max(ws):
    cl = [mk([(i, 0, 0)], [w]) for i, w in enumerate(ws)]
    assert select_cluster(cl).total_weight == max(ws)


@pytest.mark.parametrize("strategy", list(Strategy))
def test_singleton_same_under_all_strategies(strategy):
    np.testing.assert_allclose(pick_position(mk([(3, 4, 1.5)], [2.0]), strategy), [3, 4, 1.5])


def test_strategies_on_two_members():
    c = mk([(0, 0, 0), (1, 0, 0)], [1.0, 2.0])
    np.testing.assert_allclose(pick_position(c, "max_posterior"), [1, 0, 0])
    np.testing.assert_allclose(pick_position(c, "weighted_mean"), [2 / 3, 0, 0])
    np.testing.assert_allclose(pick_position(c, "combined"), [5 / 6, 0, 0])
