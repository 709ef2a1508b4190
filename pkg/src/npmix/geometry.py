"""Distances between connected pieces of finite support sets.

Mixing measures in this package are discrete, so a support set is a finite
cloud of atoms.  Connectivity is induced by a gap threshold: two atoms lie
in the same piece when a chain of atoms with consecutive distances below the
threshold joins them (single linkage).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.cluster.hierarchy import DisjointSet
from scipy.spatial.distance import cdist, pdist, squareform

from npmix.errors import InvalidArgumentError

DEFAULT_MERGE_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts[:, None]
    return pts


@dataclass
class FiniteSupportSet:
    """Atoms of a discrete mixing measure, one row per point."""

    points: np.ndarray
    merge_tol: float = DEFAULT_MERGE_TOL

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.shape[0] == 0:
            raise InvalidArgumentError("support set must be nonempty")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("support points must be finite")
        # lexicographic order first so the surviving representative of a
        # near-duplicate cluster does not depend on input order
        pts = pts[np.lexsort(pts.T[::-1])]
        keep = []
        for i, p in enumerate(pts):
            if all(np.linalg.norm(p - pts[j]) > self.merge_tol for j in keep):
                keep.append(i)
        self.points = pts[keep]

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class Interval:
    center: float
    halfwidth: float

    def __post_init__(self):
        if not self.halfwidth > 0:
            raise InvalidArgumentError("halfwidth must be positive")

    @property
    def lo(self):
        return self.center - self.halfwidth

    @property
    def hi(self):
        return self.center + self.halfwidth


@dataclass(frozen=True)
class Hypercube:
    center: np.ndarray = field()
    halfwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not self.halfwidth > 0:
            raise InvalidArgumentError("halfwidth must be positive")


def _support(s) -> FiniteSupportSet:
    return s if isinstance(s, FiniteSupportSet) else FiniteSupportSet(s)


def d_c(a, b) -> float:
    """Smallest Euclidean distance between a point of ``a`` and one of ``b``."""
    a, b = _support(a), _support(b)
    if a.points.shape[1] != b.points.shape[1]:
        raise InvalidArgumentError("dimension mismatch")
    return float(cdist(a.points, b.points).min())


def connected_components(s, gap: float) -> list[FiniteSupportSet]:
    """Single-linkage pieces of ``s`` at threshold ``gap``.

    Pieces are returned ordered by their first point's lexicographic order
    so the output does not depend on input order.
    """
    if not gap > 0:
        raise InvalidArgumentError("gap must be positive")
    s = _support(s)
    n = len(s)
    ds = DisjointSet(range(n))
    if n > 1:
        dist = squareform(pdist(s.points))
        for i, j in zip(*np.nonzero(np.triu(dist < gap, k=1))):
            ds.merge(int(i), int(j))
    pieces = []
    for subset in ds.subsets():
        pts = s.points[sorted(subset)]
        pts = pts[np.lexsort(pts.T[::-1])]
        pieces.append(pts)
    pieces.sort(key=lambda p: tuple(p[0]))
    return [FiniteSupportSet(p, s.merge_tol) for p in pieces]


def neighbor_pairs(components) -> set[tuple[int, int]]:
    """Index pairs ``(i, j)``, ``i < j``, of neighbouring pieces.

    Pieces i and j are neighbours unless some third piece is strictly closer
    to both of them than they are to each other.
    """
    comps = [_support(c) for c in components]
    K = len(comps)
    D = np.zeros((K, K))
    for i, j in combinations(range(K), 2):
        D[i, j] = D[j, i] = d_c(comps[i], comps[j])
    pairs = set()
    for i, j in combinations(range(K), 2):
        blocked = any(
            D[i, k] < D[i, j] and D[j, k] < D[i, j] for k in range(K) if k not in (i, j)
        )
        if not blocked:
            pairs.add((i, j))
    return pairs


def d_w(s, gap: float) -> float:
    """Within-set distance: largest gap between neighbouring pieces."""
    comps = connected_components(s, gap)
    if len(comps) == 1:
        return 0.0
    return max(d_c(comps[i], comps[j]) for i, j in neighbor_pairs(comps))


def d_b(s1, s2) -> float:
    """Between-set distance.  For finite sets it reduces to ``d_c``."""
    return d_c(s1, s2)


@dataclass
class SeparationReport:
    separated: bool
    max_within: float
    min_between: float
    within: list[float]

    def __bool__(self):
        return self.separated


def check_separation_C2(supports, gap: float) -> SeparationReport:
    """Test ``max_k d_w(V_k) < min_{i<j} d_b(V_i, V_j)``."""
    sets = [_support(s) for s in supports]
    within = [d_w(s, gap) for s in sets]
    max_w = max(within) if within else 0.0
    if len(sets) < 2:
        return SeparationReport(True, max_w, float("inf"), within)
    min_b = min(d_b(a, b) for a, b in combinations(sets, 2))
    return SeparationReport(max_w < min_b, max_w, min_b, within)


def hypercubes_disjoint(a: Hypercube, b: Hypercube) -> bool:
    return float(np.max(np.abs(a.center - b.center))) > a.halfwidth + b.halfwidth


def intervals_disjoint(a: Interval, b: Interval) -> bool:
    return abs(a.center - b.center) > a.halfwidth + b.halfwidth
