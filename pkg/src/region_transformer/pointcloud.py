"""Point-cloud containers and PCA surface features."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .spatial import SpatialIndex

__all__ = [
    "RawCloud",
    "FeatureCloud",
    "compute_features",
    "featurize",
    "canonical_normals",
    "FEATURE_DIM",
    "XYZ",
    "RGB",
    "NORMAL",
    "CURVATURE",
    "NXYZ",
]

FEATURE_DIM = 13
# column slices of the 13-D per-point feature row
XYZ = slice(0, 3)
RGB = slice(3, 6)
NORMAL = slice(6, 9)
CURVATURE = slice(9, 10)
NXYZ = slice(10, 13)


@dataclass(frozen=True, eq=False)
class RawCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        col = np.ascontiguousarray(self.colors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) < 1:
            raise ValueError(f"positions must be (N, 3) with N >= 1, got {pos.shape}")
        if col.shape != pos.shape:
            raise ValueError(f"colors shape {col.shape} does not match positions {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain NaN or Inf")
        if np.any(col < 0.0) or np.any(col > 1.0) or not np.all(np.isfinite(col)):
            raise ValueError("color channels must lie in [0, 1]")
        lab = None
        if self.labels is not None:
            lab = np.ascontiguousarray(self.labels, dtype=np.int64)
            if lab.shape != (len(pos),):
                raise ValueError(f"labels shape {lab.shape} does not match N={len(pos)}")
            if np.any(lab < 0):
                raise ValueError("instance labels must be non-negative")
            lab.setflags(write=False)
        pos.setflags(write=False)
        col.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.positions)

    def with_labels(self, labels) -> RawCloud:
        return RawCloud(self.positions, self.colors, labels)


@dataclass(frozen=True, eq=False)
class FeatureCloud:
    """A RawCloud plus normals, curvature and bounds-normalised coordinates."""

    raw: RawCloud
    normals: np.ndarray
    curvatures: np.ndarray
    normalized_xyz: np.ndarray
    leaf_size: int = field(default=16)

    def __len__(self) -> int:
        return len(self.raw)

    @property
    def positions(self) -> np.ndarray:
        return self.raw.positions

    @property
    def labels(self) -> np.ndarray | None:
        return self.raw.labels

    @cached_property
    def features(self) -> np.ndarray:
        """``(N, 13)``: xyz, rgb, normal, curvature, normalised xyz."""
        f = np.concatenate(
            [
                self.raw.positions,
                self.raw.colors,
                self.normals,
                self.curvatures[:, None],
                self.normalized_xyz,
            ],
            axis=1,
        )
        f.setflags(write=False)
        return f

    @cached_property
    def index(self) -> SpatialIndex:
        return SpatialIndex(self.raw.positions, leaf_size=self.leaf_size)

    def radius_graph(self, r: float) -> tuple[np.ndarray, np.ndarray]:
        cache = self.__dict__.setdefault("_graphs", {})
        if r not in cache:
            cache[r] = self.index.radius_graph(r)
        return cache[r]


def canonical_normals(normals: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Flip normals so z >= 0; z == 0 falls back to +x, then +y."""
    n = np.array(normals, dtype=np.float64, copy=True)
    key = n[:, 2].copy()
    flat = np.abs(key) <= eps
    key[flat] = n[flat, 0]
    flat2 = flat & (np.abs(n[:, 0]) <= eps)
    key[flat2] = n[flat2, 1]
    n[key < 0] *= -1.0
    return n


def _normalize_xyz(positions: np.ndarray, bounds) -> np.ndarray:
    if bounds is None:
        lo = positions.min(axis=0)
        extent = positions.max(axis=0) - lo
    else:
        b = np.asarray(bounds, dtype=np.float64)
        if b.shape == (3,):
            lo, extent = np.zeros(3), b
        elif b.shape == (2, 3):
            lo, extent = b[0], b[1] - b[0]
        else:
            raise ValueError("bounds must be 3 extents or a (2, 3) [min, max] box")
    out = np.full_like(positions, 0.5)
    ok = extent > 0
    out[:, ok] = (positions[:, ok] - lo[ok]) / extent[ok]
    return out


def _pca(positions: np.ndarray, neighbors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nbr = positions[neighbors]  # (N, k, 3)
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbors.shape[1]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = np.clip(evals, 0.0, None)
    total = evals.sum(axis=1)
    curv = np.zeros(len(positions))
    nz = total > 0
    curv[nz] = evals[nz, 0] / total[nz]
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return canonical_normals(normals), curv


def compute_features(
    cloud: RawCloud, k_normal: int = 10, bounds=None, leaf_size: int = 16
) -> FeatureCloud:
    """PCA normals/curvature over ``k_normal`` nearest neighbours (self included).

    ``bounds`` is either the room extents (min corner at the origin) or an
    explicit ``[[xmin, ymin, zmin], [xmax, ymax, zmax]]`` box.  Without it the
    cloud's own bounding box is used.
    """
    n = len(cloud)
    if k_normal < 3:
        raise ValueError("k_normal must be at least 3")
    if n < k_normal:
        raise ValueError(f"cloud has {n} points, fewer than k_normal={k_normal}")
    index = SpatialIndex(cloud.positions, leaf_size=leaf_size)
    nbrs = index.knn_many(cloud.positions, k_normal)
    normals, curv = _pca(cloud.positions, nbrs)
    fc = FeatureCloud(cloud, normals, curv, _normalize_xyz(cloud.positions, bounds), leaf_size)
    fc.__dict__["index"] = index
    return fc


def featurize(cloud: RawCloud, k_normal: int = 10, bounds=None) -> FeatureCloud:
    """Like :func:`compute_features` but tolerant of tiny clouds.

    The neighbourhood shrinks to the cloud size; below three points the
    surface is undefined and gets normal +z, curvature 0.
    """
    n = len(cloud)
    if n >= 3:
        return compute_features(cloud, min(k_normal, n), bounds)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    return FeatureCloud(cloud, normals, np.zeros(n), _normalize_xyz(cloud.positions, bounds))
