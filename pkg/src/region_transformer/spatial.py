"""k-nearest-neighbour and fixed-radius queries over 3-D point sets.

The tree itself is scipy's ``cKDTree``.  Every answer is re-ranked with the
same squared-distance expression a linear scan uses, so results are
id-for-id identical to brute force, including the tie rule
(equal distances -> smaller id first).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

__all__ = ["SpatialIndex", "knn", "radius_query", "brute_knn", "brute_radius"]

# relative slack used when widening a tree query before exact filtering
_SLACK = 1e-7


def _sqdist(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    # fixed left-to-right summation, so exactly tied lattice distances round identically everywhere
    sq = (points - query) ** 2
    return (sq[..., 0] + sq[..., 1]) + sq[..., 2]


def brute_knn(positions: np.ndarray, query, k: int) -> np.ndarray:
    """Linear-scan k-NN with the (distance, id) ordering used everywhere."""
    positions = np.asarray(positions, dtype=np.float64)
    d2 = _sqdist(positions, np.asarray(query, dtype=np.float64))
    order = np.lexsort((np.arange(len(d2)), d2))
    return order[:k]


def brute_radius(positions: np.ndarray, query, r: float) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    d2 = _sqdist(positions, np.asarray(query, dtype=np.float64))
    return np.flatnonzero(d2 <= r * r)


class SpatialIndex:
    """Immutable k-d tree over an ``(N, 3)`` position array."""

    def __init__(self, positions, leaf_size: int = 16):
        pts = np.ascontiguousarray(positions, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError(f"expected a non-empty (N, 3) array, got {pts.shape}")
        if leaf_size < 1:
            raise ValueError("leaf_size must be positive")
        pts.setflags(write=False)
        self.positions = pts
        self.leaf_size = leaf_size
        self._tree = cKDTree(pts, leafsize=leaf_size, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.positions)

    # -- k nearest ---------------------------------------------------------
    def knn(self, query, k: int) -> np.ndarray:
        return self.knn_many(np.asarray(query, dtype=np.float64)[None, :], k)[0]

    def knn_many(self, queries, k: int) -> np.ndarray:
        """Row ``i`` holds the ``k`` nearest ids of ``queries[i]``, nearest first."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.positions)
        if k > n:
            raise ValueError(f"k={k} exceeds the number of indexed points ({n})")
        if k < 1:
            raise ValueError("k must be at least 1")
        if len(q) == 0:
            return np.empty((0, k), dtype=np.int64)
        kk = min(k + 1, n)
        _, idx = self._tree.query(q, k=kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), kk)
        d2 = _sqdist(self.positions[idx], q[:, None, :])
        # sort candidates by exact distance, then id
        order = np.lexsort((idx, d2), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        if kk == k:
            return idx
        kth = d2[:, k - 1]
        unsafe = d2[:, k] <= kth * (1.0 + 4 * _SLACK) + 1e-300
        out = idx[:, :k].copy()
        for row in np.flatnonzero(unsafe):
            out[row] = self._knn_exact(q[row], k, kth[row])
        return out

    def _knn_exact(self, query: np.ndarray, k: int, kth_d2: float) -> np.ndarray:
        r = np.sqrt(kth_d2) * (1.0 + _SLACK) + 1e-12
        cand = np.asarray(self._tree.query_ball_point(query, r), dtype=np.int64)
        d2 = _sqdist(self.positions[cand], query)
        order = np.lexsort((cand, d2))
        return cand[order[:k]]

    # -- fixed radius ------------------------------------------------------
    def radius_query(self, query, r: float) -> np.ndarray:
        """Sorted ids with squared distance <= r**2."""
        return self.radius_many(np.asarray(query, dtype=np.float64)[None, :], r)[0]

    def radius_many(self, queries, r: float) -> list[np.ndarray]:
        if not r > 0:
            raise ValueError("radius must be positive")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        lists = self._tree.query_ball_point(q, r * (1.0 + _SLACK) + 1e-12)
        out = []
        for row, cand in enumerate(lists):
            cand = np.asarray(cand, dtype=np.int64)
            cand.sort()
            keep = _sqdist(self.positions[cand], q[row]) <= r * r
            out.append(cand[keep])
        return out

    def radius_graph(self, r: float) -> tuple[np.ndarray, np.ndarray]:
        """CSR adjacency ``(indptr, indices)`` of every indexed point's radius neighbourhood.

        Each point lists itself.  Used to make repeated frontier expansion cheap.
        """
        lists = self.radius_many(self.positions, r)
        counts = np.fromiter((len(c) for c in lists), dtype=np.int64, count=len(lists))
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = np.concatenate(lists) if lists else np.empty(0, dtype=np.int64)
        return indptr, indices


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    return index.knn(query, k)


def radius_query(index: SpatialIndex, query, r: float) -> np.ndarray:
    return index.radius_query(query, r)
