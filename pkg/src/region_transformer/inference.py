"""Seeded iterative region growth driven by add/remove mask models."""

from __future__ import annotations

import logging
import math
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .network import RegionNetwork, aggregate_rows, center_sets, resample_set
from .pointcloud import FeatureCloud
from .simulate import frontier
from .spatial import SpatialIndex

__all__ = [
    "MaskModel",
    "NetworkMaskModel",
    "OracleMaskModel",
    "ConstantMaskModel",
    "RandomMaskModel",
    "OscillatingMaskModel",
    "SegmentParams",
    "GrowthResult",
    "SegmentationResult",
    "select_seed",
    "grow_region",
    "segment",
    "merge_small_segments",
    "classic_region_grow",
    "NO_NEIGHBORS",
    "EMPTY_ADD",
    "STALLED",
    "MAX_ITERS",
]

log = logging.getLogger(__name__)

NO_NEIGHBORS = "no_neighbors"
EMPTY_ADD = "empty_add"
STALLED = "stalled"
MAX_ITERS = "max_iters"
THRESHOLD = 0.5


class MaskModel(Protocol):
    def predict_masks(
        self, cloud: FeatureCloud, seed: int, inliers: np.ndarray, neighbors: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return (add probability per neighbour, remove probability per inlier)."""
        ...


class NetworkMaskModel:
    """Masks from a trained :class:`RegionNetwork`.

    Neighbour sets larger than the set size are split into chunks so every
    candidate is scored; each chunk is paired with a fresh inlier resample.
    ``chunked=False`` scores a single resample of each set, leaving unsampled
    candidates for later iterations.
    """

    def __init__(self, net: RegionNetwork, chunked: bool = True, max_batch: int = 16):
        self.net = net
        self.chunked = chunked
        self.max_batch = max_batch
        self._feats: tuple[int, np.ndarray] | None = None

    def _features(self, cloud):
        if self._feats is None or self._feats[0] != id(cloud):
            self._feats = (id(cloud), np.asarray(cloud.features, dtype=self.net.dtype))
        return self._feats[1]

    def predict_masks(self, cloud, seed, inliers, neighbors, rng):
        s = self.net.config.set_size
        feats = self._features(cloud)
        n_chunks = max(1, math.ceil(len(neighbors) / s)) if self.chunked else 1
        chunks = np.array_split(rng.permutation(neighbors), n_chunks)
        rows_i, rows_n, maps_i, maps_n = [], [], [], []
        for chunk in chunks:
            ri, mi = resample_set(inliers, feats, s, rng)
            rn, mn = resample_set(chunk, feats, s, rng)
            ri, rn = center_sets(ri, rn)
            rows_i.append(ri)
            rows_n.append(rn)
            maps_i.append(mi)
            maps_n.append(mn)
        add_parts, rem_parts = [], []
        for lo in range(0, n_chunks, self.max_batch):
            add, rem, _ = self.net.forward(np.stack(rows_i[lo : lo + self.max_batch]), np.stack(rows_n[lo : lo + self.max_batch]))
            add_parts.append(add.ravel())
            rem_parts.append(rem.ravel())
        _, add_p = aggregate_rows(np.concatenate(add_parts), np.concatenate(maps_n), neighbors)
        _, rem_p = aggregate_rows(np.concatenate(rem_parts), np.concatenate(maps_i), inliers)
        # unscored points count as "not added" / "not removed"
        return np.nan_to_num(add_p, nan=0.0), np.nan_to_num(rem_p, nan=0.0)


class OracleMaskModel:
    """Ground-truth masks from the cloud's instance labels."""

    def predict_masks(self, cloud, seed, inliers, neighbors, rng):
        labels = cloud.labels
        if labels is None:
            raise ValueError("the oracle model needs a labelled cloud")
        own = labels[seed]
        return (labels[neighbors] == own).astype(float), (labels[inliers] != own).astype(float)


class ConstantMaskModel:
    def __init__(self, add: float = 0.0, remove: float = 0.0):
        self.add = add
        self.remove = remove

    def predict_masks(self, cloud, seed, inliers, neighbors, rng):
        return np.full(len(neighbors), self.add), np.full(len(inliers), self.remove)


class RandomMaskModel:
    def predict_masks(self, cloud, seed, inliers, neighbors, rng):
        return rng.random(len(neighbors)), rng.random(len(inliers))


class OscillatingMaskModel:
    """Adversary that alternates between two candidates so the region never settles.

    Each call adds the lowest-id candidate and removes every non-seed inlier,
    so the region flips between ``{seed, x}`` and ``{seed, y}``.
    """

    def predict_masks(self, cloud, seed, inliers, neighbors, rng):
        add = np.zeros(len(neighbors))
        if len(neighbors):
            add[np.argmin(neighbors)] = 1.0
        return add, (inliers != seed).astype(float)


@dataclass(frozen=True)
class SegmentParams:
    r_grow: float = 0.15
    max_iters: int = 200
    min_size: int = 8
    permanent_exclusion: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.r_grow <= 0:
            raise ValueError("r_grow must be positive")
        if self.max_iters < 1 or self.min_size < 1:
            raise ValueError("max_iters and min_size must be at least 1")


@dataclass
class GrowthResult:
    inliers: np.ndarray
    reason: str
    iterations: int
    sizes: list = field(default_factory=list)


@dataclass
class SegmentationResult:
    labels: np.ndarray
    seeds: list
    iterations: list
    reasons: list
    seconds: list
    total_seconds: float = 0.0

    def report(self) -> dict:
        return {
            "points": int(len(self.labels)),
            "regions": len(self.seeds),
            "segments": int(self.labels.max() + 1) if len(self.labels) else 0,
            "iterations": [int(i) for i in self.iterations],
            "reasons": list(self.reasons),
            "reason_histogram": dict(sorted(Counter(self.reasons).items())),
            "region_seconds": [round(s, 6) for s in self.seconds],
            "total_seconds": round(self.total_seconds, 6),
        }


def select_seed(curvatures: np.ndarray, unlabeled) -> int:
    """Lowest-curvature unlabelled id; ties go to the smallest id."""
    curvatures = np.asarray(curvatures).ravel()
    unlabeled = np.asarray(unlabeled)
    ids = np.flatnonzero(unlabeled) if unlabeled.dtype == bool else np.sort(unlabeled.astype(np.int64))
    if ids.size == 0:
        raise ValueError("every point is already labelled")
    return int(ids[np.argmin(curvatures[ids])])


def grow_region(
    model: MaskModel,
    cloud: FeatureCloud,
    seed: int,
    r_grow: float = 0.15,
    max_iters: int = 200,
    labeled: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    permanent_exclusion: bool = False,
) -> GrowthResult:
    """Grow one region from ``seed`` until a stop rule fires.

    Each iteration scores the unlabelled points within ``r_grow`` of the
    region, applies additions and removals (the seed is never removed), then
    checks the stop rules.  Removed points rejoin the candidate pool unless
    ``permanent_exclusion`` is set.
    """
    n = len(cloud)
    labeled = np.zeros(n, dtype=bool) if labeled is None else labeled
    if labeled[seed]:
        raise ValueError(f"seed {seed} is already labelled")
    rng = rng if rng is not None else np.random.default_rng(0)
    graph = cloud.radius_graph(r_grow)
    member = np.zeros(n, dtype=bool)
    member[seed] = True
    blocked = labeled.copy()
    inliers = np.array([seed], dtype=np.int64)
    sizes = deque([1], maxlen=3)
    history = [1]
    for it in range(1, max_iters + 1):
        reach = frontier(graph, inliers)
        neighbors = reach[~(member[reach] | blocked[reach])]
        if neighbors.size == 0:
            return GrowthResult(inliers, NO_NEIGHBORS, it - 1, history)
        add_p, rem_p = model.predict_masks(cloud, seed, inliers, neighbors, rng)
        add = neighbors[np.asarray(add_p) > THRESHOLD]
        remove = inliers[(np.asarray(rem_p) > THRESHOLD) & (inliers != seed)]
        member[add] = True
        member[remove] = False
        if permanent_exclusion:
            blocked[remove] = True
        inliers = np.flatnonzero(member)
        sizes.append(len(inliers))
        history.append(len(inliers))
        if add.size == 0:
            return GrowthResult(inliers, EMPTY_ADD, it, history)
        if len(sizes) == 3 and sizes[0] == sizes[1] == sizes[2]:
            return GrowthResult(inliers, STALLED, it, history)
    log.warning("region from seed %d hit the %d-iteration cap", seed, max_iters)
    return GrowthResult(inliers, MAX_ITERS, max_iters, history)


def merge_small_segments(labels, positions: np.ndarray, min_size: int = 8) -> np.ndarray:
    """Dissolve segments under ``min_size`` into the nearest surviving point's segment.

    When no segment is large enough the largest one (lowest id on ties)
    survives.  Output ids are contiguous from 0 in order of the input ids.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return labels.copy()
    uniq, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    keep = counts >= min_size
    if not keep.any():
        keep[np.argmax(counts)] = True
    out = inv.copy()
    small = ~keep[inv]
    if small.any():
        surv_ids = np.flatnonzero(~small)
        index = SpatialIndex(np.asarray(positions)[surv_ids])
        nearest = index.knn_many(np.asarray(positions)[small], 1)[:, 0]
        out[small] = inv[surv_ids[nearest]]
    _, compact = np.unique(out, return_inverse=True)
    return compact.astype(np.int64)


def _finish(cloud, labels, seeds, iters, reasons, secs, params, t0):
    labels = merge_small_segments(labels, cloud.positions, params.min_size)
    return SegmentationResult(labels, seeds, iters, reasons, secs, time.perf_counter() - t0)


def segment(model: MaskModel, cloud: FeatureCloud, params: SegmentParams | None = None) -> SegmentationResult:
    """Label every point by repeated seed selection and region growth."""
    params = params or SegmentParams()
    rng = np.random.default_rng(params.seed)
    n = len(cloud)
    t0 = time.perf_counter()
    labels = np.full(n, -1, dtype=np.int64)
    labeled = np.zeros(n, dtype=bool)
    curv = cloud.curvatures
    seeds, iters, reasons, secs = [], [], [], []
    while not labeled.all():
        t_region = time.perf_counter()
        seed = select_seed(curv, ~labeled)
        res = grow_region(
            model, cloud, seed, params.r_grow, params.max_iters, labeled, rng, params.permanent_exclusion
        )
        labels[res.inliers] = len(seeds)
        labeled[res.inliers] = True
        seeds.append(seed)
        iters.append(res.iterations)
        reasons.append(res.reason)
        secs.append(time.perf_counter() - t_region)
    return _finish(cloud, labels, seeds, iters, reasons, secs, params, t0)


def classic_region_grow(
    cloud: FeatureCloud,
    angle_thresh: float = 30.0,
    curv_thresh: float = 0.05,
    r_grow: float = 0.15,
    min_size: int = 8,
) -> SegmentationResult:
    """Smoothness-constrained region growing on normals and curvature.

    Angles compare unoriented normals (|cos|).  A neighbour joins when its
    normal is within ``angle_thresh`` degrees of the expanding point's, and
    expands further only if its curvature is below ``curv_thresh``.
    """
    t0 = time.perf_counter()
    n = len(cloud)
    indptr, indices = cloud.radius_graph(r_grow)
    normals = np.asarray(cloud.normals)
    curv = np.asarray(cloud.curvatures).ravel()
    cos_t = math.cos(math.radians(angle_thresh))
    labels = np.full(n, -1, dtype=np.int64)
    order = np.lexsort((np.arange(n), curv))  # lowest curvature first, ties by id
    seeds, iters, reasons, secs = [], [], [], []
    cursor = 0
    while cursor < n:
        seed = int(order[cursor])
        cursor += 1
        if labels[seed] >= 0:
            continue
        t_region = time.perf_counter()
        lab = len(seeds)
        labels[seed] = lab
        queue = deque([seed])
        expansions = 0
        while queue:
            p = queue.popleft()
            expansions += 1
            nb = indices[indptr[p] : indptr[p + 1]]
            nb = nb[labels[nb] < 0]
            if nb.size == 0:
                continue
            ok = nb[np.abs(normals[nb] @ normals[p]) >= cos_t]
            labels[ok] = lab
            queue.extend(int(q) for q in ok[curv[ok] < curv_thresh])
        seeds.append(seed)
        iters.append(expansions)
        reasons.append(NO_NEIGHBORS)
        secs.append(time.perf_counter() - t_region)
    params = SegmentParams(r_grow=r_grow, min_size=min_size)
    return _finish(cloud, labels, seeds, iters, reasons, secs, params, t0)
