import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npmix.errors import InvalidArgumentError
from npmix.geometry import (
    FiniteSupportSet,
    Hypercube,
    Interval,
    check_separation_C2,
    connected_components,
    d_b,
    d_c,
    d_w,
    hypercubes_disjoint,
    intervals_disjoint,
    neighbor_pairs,
)

points_1d = st.lists(st.floats(-20, 20, allow_nan=False), min_size=1, max_size=20)


def _as_sets(pieces):
    return sorted(tuple(sorted(map(tuple, p.points))) for p in pieces)


class TestDc:
    def test_examples(self):
        assert d_c([0, 1], [2, 3]) == 1.0
        assert d_c([[0, 0]], [[3, 4]]) == 5.0
        assert d_c([0, 1], [0, 1]) == 0.0

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            d_c([], [1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            d_c([[0.0, 0.0]], [1.0])

    @given(points_1d, points_1d)
    def test_symmetric(self, a, b):
        assert d_c(a, b) == d_c(b, a)
        assert d_c(a, a) == 0.0

    @settings(max_examples=50)
    @given(points_1d, points_1d, points_1d)
    def test_triangle_style_bound(self, a, b, c):
        diam = np.ptp(FiniteSupportSet(b).points)
        assert d_c(a, c) <= d_c(a, b) + diam + d_c(b, c) + 1e-9


class TestComponents:
    def test_examples(self):
        pieces = connected_components([0, 0.1, 5, 5.1], 1.0)
        assert _as_sets(pieces) == [((0.0,), (0.1,)), ((5.0,), (5.1,))]
        assert len(connected_components([0], 0.3)) == 1
        assert len(connected_components([0, 1, 2, 3], 1.5)) == 1

    def test_gap_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            connected_components([0, 1], 0.0)

    def test_duplicates_merged(self):
        s = FiniteSupportSet([0.0, 1e-12, 1.0])
        assert len(s) == 2

    @settings(max_examples=80)
    @given(points_1d, st.floats(0.1, 5))
    def test_matches_graph_oracle(self, pts, gap):
        s = FiniteSupportSet(pts)
        g = nx.Graph()
        g.add_nodes_from(range(len(s)))
        for i, j in itertools.combinations(range(len(s)), 2):
            if np.linalg.norm(s.points[i] - s.points[j]) < gap:
                g.add_edge(i, j)
        oracle = sorted(tuple(sorted(tuple(s.points[i]) for i in comp)) for comp in nx.connected_components(g))
        assert _as_sets(connected_components(s, gap)) == oracle

    @settings(max_examples=50)
    @given(points_1d, st.floats(0.1, 5), st.randoms())
    def test_permutation_invariant(self, pts, gap, rnd):
        shuffled = list(pts)
        rnd.shuffle(shuffled)
        assert _as_sets(connected_components(pts, gap)) == _as_sets(connected_components(shuffled, gap))


class TestNeighbors:
    def test_three_pieces(self):
        comps = [[0, 1], [2, 3], [7, 8]]
        assert neighbor_pairs(comps) == {(0, 1), (1, 2)}

    def test_two_and_one(self):
        assert neighbor_pairs([[0], [4]]) == {(0, 1)}
        assert neighbor_pairs([[0]]) == set()


class TestDw:
    def test_examples(self):
        assert d_w([0, 1, 2, 3, 7, 8], 1.5) == 4.0
        assert d_w([0, 0.2, 0.4], 1.0) == 0.0
        assert d_w([0, 2], 1.0) == 2.0

    def test_three_separate_pieces(self):
        assert d_w([0, 1, 2, 3, 7, 8], 1.0) == 4.0


class TestDb:
    def test_examples(self):
        assert d_b([0, 1], [5, 9]) == 4.0
        assert d_b([0, 1, 2], [2, 3]) == 0.0
        assert d_b([[0, 0]], [[0, 3]]) == 3.0


class TestSeparation:
    def test_separated(self):
        rep = check_separation_C2([[-3.1, -2.9], [2.9, 3.1]], 1.0)
        assert rep.separated
        assert rep.max_within == 0.0
        assert rep.min_between == pytest.approx(5.8)

    def test_not_separated(self):
        rep = check_separation_C2([[0, 2], [3, 5]], 1.0)
        assert not rep
        assert rep.max_within == 2.0 and rep.min_between == 1.0

    def test_single_linkage_merges_at_wide_gap(self):
        # at gap 3 each support is one piece, so d_w = 0 < d_b = 1
        assert check_separation_C2([[0, 2], [3, 5]], 3.0).separated

    def test_single_support(self):
        rep = check_separation_C2([[0, 5, 9]], 1.0)
        assert rep.separated and rep.min_between == np.inf

    @settings(max_examples=80)
    @given(points_1d, points_1d, st.floats(0.2, 3), st.data())
    def test_monotone_under_redundant_removal(self, a, b, gap, data):
        # dropping an interior point whose neighbours stay linked leaves
        # every piece and every between distance intact
        a = FiniteSupportSet([x - 50 for x in a]).points[:, 0]
        rep = check_separation_C2([a, b], gap)
        inner = [i for i in range(1, a.size - 1) if a[i + 1] - a[i - 1] < gap]
        if not rep.separated or not inner:
            return
        drop = data.draw(st.sampled_from(inner))
        rep2 = check_separation_C2([np.delete(a, drop), b], gap)
        assert rep2.min_between == rep.min_between
        assert rep2.separated

    def test_removing_a_bridge_can_break_separation(self):
        # a bridging point keeps {0, 0.8, 1.6} connected; without it d_w jumps
        assert check_separation_C2([[0, 0.8, 1.6], [3.0]], 1.0).separated
        assert not check_separation_C2([[0, 1.6], [3.0]], 1.0).separated


class TestRegions:
    def test_hypercubes(self):
        assert hypercubes_disjoint(Hypercube([0, 0], 1), Hypercube([3, 0], 1))
        assert not hypercubes_disjoint(Hypercube([0, 0], 1), Hypercube([1.5, 0], 1))
        assert not hypercubes_disjoint(Hypercube([0, 0], 1), Hypercube([0, 0], 1))

    def test_intervals(self):
        assert intervals_disjoint(Interval(0, 1), Interval(3, 1))
        assert not intervals_disjoint(Interval(0, 1), Interval(2, 1))
        assert Interval(1, 2).lo == -1 and Interval(1, 2).hi == 3

    def test_invalid_halfwidth(self):
        with pytest.raises(InvalidArgumentError):
            Interval(0, 0)
        with pytest.raises(InvalidArgumentError):
            Hypercube([0, 0], -1)
