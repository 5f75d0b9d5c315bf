"""Radius and k-nearest neighbour queries over a fixed point set.

Every query is answered with a deterministic order: ascending Euclidean
distance, ties broken by the lower point index. The k-d tree only proposes
candidates; distances are recomputed with the same arithmetic the
exhaustive-scan oracle uses, so both routes agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .geometry import PointSet

# relative slack when deciding whether tree distances are too close to call
_NEAR_TIE = 1e-9


@dataclass(frozen=True)
class QueryResult:
    indices: np.ndarray  # (Q, K) int64
    distances: np.ndarray  # (Q, K) float64
    out_of_ball: np.ndarray  # (Q,) bool: empty ball, nearest point substituted
    found: np.ndarray  # (Q,) int64: in-ball count before replication (capped at K)


def _as_positions(points) -> np.ndarray:
    P = points.positions if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    return np.ascontiguousarray(P, dtype=np.float64).reshape(-1, 3)


def exact_distances(P: np.ndarray, centers: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Euclidean distances ``|P[idx] - c|`` with the shared reference arithmetic."""
    diff = P[idx] - centers[:, None, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _rank(idx: np.ndarray, dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort each row by (distance, index)."""
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(idx, order, -1), np.take_along_axis(dist, order, -1)


def _replicate(idx, dist, found, K):
    """Cyclically repeat the first ``found`` entries of each row to fill K slots."""
    cols = np.arange(K)[None, :] % np.maximum(found, 1)[:, None]
    return np.take_along_axis(idx, cols, -1), np.take_along_axis(dist, cols, -1)


class SpatialIndex:
    """Immutable k-d tree over a point set."""

    def __init__(self, points):
        P = _as_positions(points)
        if len(P) == 0:
            raise InputError("cannot build a spatial index over an empty point set")
        if not np.all(np.isfinite(P)):
            raise InputError("point positions must be finite")
        P.setflags(write=False)
        self._points = P
        self._tree = cKDTree(P, balanced_tree=False, compact_nodes=False)
        self.source = points

    @property
    def positions(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return len(self._points)

    def knn(self, centers, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours for each center, shape (Q, k)."""
        C = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        N = len(self._points)
        if k < 1 or k > N:
            raise InputError(f"k must lie in [1, {N}], got {k}")
        if len(C) == 0:
            return np.zeros((0, k), np.int64), np.zeros((0, k))
        if k == N:
            idx = np.broadcast_to(np.arange(N), (len(C), N)).copy()
            return _rank(idx, exact_distances(self._points, C, idx))

        tree_d, tree_i = self._tree.query(C, k=k + 1)
        tree_d = tree_d.reshape(len(C), k + 1)
        tree_i = tree_i.reshape(len(C), k + 1).astype(np.int64)
        idx = tree_i[:, :k]
        dist = exact_distances(self._points, C, idx)
        idx, dist = _rank(idx, dist)

        # the (k+1)-th candidate is too close to the k-th to trust the tree's cut
        kth = tree_d[:, k - 1]
        ambiguous = np.nonzero(tree_d[:, k] <= kth * (1 + _NEAR_TIE) + 1e-300)[0]
        for q in ambiguous:
            cand = np.asarray(self._tree.query_ball_point(C[q], kth[q] * (1 + 2 * _NEAR_TIE) + 1e-300),
                              dtype=np.int64)
            cd = exact_distances(self._points, C[q:q + 1], cand[None])[0]
            ci, cd = _rank(cand[None], cd[None])
            idx[q], dist[q] = ci[0, :k], cd[0, :k]
        return idx, dist

    def ball_query(self, centers, radius, K: int) -> QueryResult:
        """K neighbours within ``radius`` of each center.

        ``radius`` is a scalar or one value per center. Fewer than K hits are
        replicated cyclically nearest-first; an empty ball yields the nearest
        point K times and sets ``out_of_ball``.
        """
        C = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        r = np.broadcast_to(np.asarray(radius, dtype=np.float64), (len(C),))
        if K < 1:
            raise InputError("K must be >= 1")
        if np.any(~(r > 0)):
            raise InputError("radius must be positive")
        k = min(K, len(self._points))
        idx, dist = self.knn(C, k)
        # nearest-first ordering means the in-ball hits form a prefix
        found = (dist <= r[:, None]).sum(axis=1)
        empty = found == 0
        idx, dist = _replicate(idx, dist, np.where(empty, 1, found), K)
        return QueryResult(idx, dist, empty, found)


def build(points) -> SpatialIndex:
    return SpatialIndex(points)


def ball_query(index: SpatialIndex, center, r, K: int) -> QueryResult:
    return index.ball_query(center, r, K)


def knn_query(index: SpatialIndex, center, k: int) -> tuple[np.ndarray, np.ndarray]:
    return index.knn(center, k)


# ---------------------------------------------------------------------------
# exhaustive-scan oracle


def brute_force_knn(points, centers, k: int) -> tuple[np.ndarray, np.ndarray]:
    P = _as_positions(points)
    C = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    N = len(P)
    if k < 1 or k > N:
        raise InputError(f"k must lie in [1, {N}], got {k}")
    rows_i, rows_d = [], []
    for c in C:
        d = np.sqrt(((P - c) * (P - c)).sum(axis=1))
        order = np.lexsort((np.arange(N), d))[:k]
        rows_i.append(order)
        rows_d.append(d[order])
    return np.array(rows_i, dtype=np.int64).reshape(len(C), k), np.array(rows_d).reshape(len(C), k)


def brute_force_ball_query(points, centers, r, K: int) -> QueryResult:
    """Reference implementation of :meth:`SpatialIndex.ball_query` by full scan."""
    P = _as_positions(points)
    if len(P) == 0:
        raise InputError("empty point set")
    C = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (len(C),))
    if K < 1 or np.any(~(r > 0)):
        raise InputError("need K >= 1 and r > 0")
    out_i = np.zeros((len(C), K), np.int64)
    out_d = np.zeros((len(C), K))
    empty = np.zeros(len(C), bool)
    found = np.zeros(len(C), np.int64)
    for q, c in enumerate(C):
        d = np.sqrt(((P - c) * (P - c)).sum(axis=1))
        ranked = np.lexsort((np.arange(len(P)), d))
        inside = ranked[d[ranked] <= r[q]][:K]
        if len(inside) == 0:
            inside = ranked[:1]
            empty[q] = True
        else:
            found[q] = len(inside)
        picks = inside[np.arange(K) % len(inside)]
        out_i[q] = picks
        out_d[q] = d[picks]
    return QueryResult(out_i, out_d, empty, found)
