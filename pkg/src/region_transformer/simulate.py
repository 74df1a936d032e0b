"""Synthetic labelled rooms and noisy region-growth training examples."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .pointcloud import NORMAL, NXYZ, XYZ, FeatureCloud, RawCloud

__all__ = [
    "SceneSpec",
    "InfeasibleSceneError",
    "TrainingExample",
    "generate_scene",
    "true_region",
    "simulate_growth_example",
    "anneal_theta",
    "augment",
    "random_augmentation",
    "apply_augmentation",
    "frontier",
    "save_dataset",
    "load_dataset",
    "example_rng",
]

JITTER_SIGMA = 0.002


class InfeasibleSceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    room: tuple = (3.0, 3.0, 2.5)
    objects: tuple = (2, 5)  # inclusive range of object count
    primitives: tuple = ("box", "sphere", "cylinder")
    size: tuple = (0.25, 0.6)  # object diameter / side range (m)
    density: float = 200.0  # surface points per square metre
    min_points: int = 8
    floor: bool = True
    walls: bool = False
    spacing: float = 0.2  # minimum horizontal gap between object footprints (m)
    lift: float = 0.0  # objects hover this far above the floor (m)
    color_noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if len(self.room) != 3 or min(self.room) <= 0:
            raise ValueError("room extents must be three positive lengths")
        lo, hi = self.objects
        if lo < 0 or hi < lo:
            raise ValueError("objects must be a (min, max) range with 0 <= min <= max")
        if self.size[0] <= 0 or self.size[1] < self.size[0]:
            raise ValueError("size must be a positive (min, max) range")
        if self.density <= 0 or self.min_points < 1:
            raise ValueError("density and min_points must be positive")
        bad = set(self.primitives) - {"box", "sphere", "cylinder"}
        if bad or not self.primitives:
            raise ValueError(f"unknown primitives {sorted(bad)}")
        if not (self.floor or self.walls or hi > 0):
            raise ValueError("scene would be empty")


def _count(area: float, spec: SceneSpec, rng) -> int:
    return max(spec.min_points, int(rng.poisson(area * spec.density)))


def _sample_box(center, half, yaw, n, on_floor, rng):
    hx, hy, hz = half
    faces = [  # (axis, sign, area)
        (0, 1, 4 * hy * hz), (0, -1, 4 * hy * hz),
        (1, 1, 4 * hx * hz), (1, -1, 4 * hx * hz),
        (2, 1, 4 * hx * hy),
    ]
    if not on_floor:
        faces.append((2, -1, 4 * hx * hy))
    areas = np.array([f[2] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.array(half)
    for i, (axis, sign, _) in enumerate(faces):
        pts[which == i, axis] = sign * half[axis]
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return pts @ rot.T + center


def _sample_sphere(center, radius, n, rng):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _sample_cylinder(center, radius, half_h, n, on_floor, rng):
    side = 2 * np.pi * radius * 2 * half_h
    cap = np.pi * radius**2
    parts = np.array([side, cap] + ([cap] if not on_floor else []))
    which = rng.choice(len(parts), size=n, p=parts / parts.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    r = np.where(which == 0, radius, radius * np.sqrt(rng.uniform(size=n)))
    pts[:, 0] = r * np.cos(theta)
    pts[:, 1] = r * np.sin(theta)
    pts[:, 2] = np.where(which == 0, rng.uniform(-half_h, half_h, size=n), np.where(which == 1, half_h, -half_h))
    return pts + center


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> RawCloud:
    """Room with an optional floor/walls and non-overlapping primitives, one instance each."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    rx, ry, rz = spec.room
    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    placed: list[tuple[float, float, float]] = []  # footprint circles (x, y, r)
    parts: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    colors: list[np.ndarray] = []
    on_floor = spec.lift <= 0

    def add(points, base_color):
        lab = len(parts)
        parts.append(points)
        labels.append(np.full(len(points), lab))
        noise = rng.normal(0.0, spec.color_noise, size=(len(points), 3))
        colors.append(np.clip(base_color + noise, 0.0, 1.0))

    for _ in range(n_obj):
        kind = spec.primitives[int(rng.integers(len(spec.primitives)))]
        size = rng.uniform(*spec.size)
        foot = size / 2 * (np.sqrt(2) if kind == "box" else 1.0)
        for _attempt in range(100):
            x = rng.uniform(foot, rx - foot) if rx > 2 * foot else np.nan
            y = rng.uniform(foot, ry - foot) if ry > 2 * foot else np.nan
            if np.isnan(x) or np.isnan(y):
                continue
            if all(np.hypot(x - px, y - py) >= foot + pr + spec.spacing for px, py, pr in placed):
                break
        else:
            raise InfeasibleSceneError(f"could not place object {len(placed) + 1} of {n_obj} after 100 attempts")
        placed.append((x, y, foot))
        base = rng.uniform(0.05, 0.95, size=3)
        if kind == "box":
            half = np.array([size / 2, rng.uniform(0.5, 1.0) * size / 2, rng.uniform(0.5, 1.2) * size / 2])
            center = np.array([x, y, spec.lift + half[2]])
            area = 2 * (4 * half[0] * half[1] + 4 * half[0] * half[2] + 4 * half[1] * half[2])
            pts = _sample_box(center, half, rng.uniform(0, np.pi), _count(area, spec, rng), on_floor, rng)
        elif kind == "sphere":
            radius = size / 2
            center = np.array([x, y, spec.lift + radius])
            pts = _sample_sphere(center, radius, _count(4 * np.pi * radius**2, spec, rng), rng)
        else:
            radius = size / 2
            half_h = rng.uniform(0.4, 1.0) * size
            center = np.array([x, y, spec.lift + half_h])
            area = 2 * np.pi * radius * 2 * half_h + 2 * np.pi * radius**2
            pts = _sample_cylinder(center, radius, half_h, _count(area, spec, rng), on_floor, rng)
        add(pts, base)

    if spec.floor:
        n = _count(rx * ry, spec, rng)
        pts = np.column_stack([rng.uniform(0, rx, n), rng.uniform(0, ry, n), np.zeros(n)])
        if on_floor and placed:
            # the floor is not scanned underneath resting objects
            hidden = np.zeros(n, dtype=bool)
            for px, py, pr in placed:
                hidden |= np.hypot(pts[:, 0] - px, pts[:, 1] - py) < pr * 0.7
            pts = pts[~hidden]
        add(pts, rng.uniform(0.3, 0.7) * np.ones(3) + rng.uniform(-0.05, 0.05, 3))
    if spec.walls:
        for axis, coord, length in ((0, 0.0, ry), (0, rx, ry), (1, 0.0, rx), (1, ry, rx)):
            n = _count(length * rz, spec, rng)
            pts = np.empty((n, 3))
            pts[:, axis] = coord
            pts[:, 1 - axis] = rng.uniform(0, length, n)
            pts[:, 2] = rng.uniform(0, rz, n)
            add(pts, rng.uniform(0.4, 0.9) * np.ones(3))

    if not parts:
        raise InfeasibleSceneError("scene has no surfaces")
    positions = np.concatenate(parts)
    positions = positions + rng.normal(0.0, JITTER_SIGMA, size=positions.shape)
    return RawCloud(positions, np.concatenate(colors), np.concatenate(labels))


# -- growth simulation ---------------------------------------------------------


def frontier(graph, ids) -> np.ndarray:
    """Sorted union of the radius neighbourhoods of ``ids`` (including ``ids``)."""
    indptr, indices = graph
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return ids
    starts, ends = indptr[ids], indptr[ids + 1]
    lens = ends - starts
    offs = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    flat = indices[np.arange(lens.sum()) + offs]
    return np.unique(flat)


def true_region(cloud: FeatureCloud, seed: int, steps: int, r_grow: float) -> np.ndarray:
    """Seed's same-label region after ``steps`` rounds of radius growth (sorted ids)."""
    labels = cloud.labels
    graph = cloud.radius_graph(r_grow)
    same = labels == labels[seed]
    member = np.zeros(len(cloud), dtype=bool)
    member[seed] = True
    current = np.array([seed])
    for _ in range(steps):
        reach = frontier(graph, current)
        new = reach[same[reach] & ~member[reach]]
        if new.size == 0:
            break
        member[new] = True
        current = np.flatnonzero(member)
    return np.flatnonzero(member)


@dataclass
class TrainingExample:
    seed: int
    step: int
    theta: float
    inliers: np.ndarray
    neighbors: np.ndarray
    add_truth: np.ndarray
    remove_truth: np.ndarray
    scene: int = 0

    def __post_init__(self):
        self.inliers = np.asarray(self.inliers, dtype=np.int64)
        self.neighbors = np.asarray(self.neighbors, dtype=np.int64)
        self.add_truth = np.asarray(self.add_truth, dtype=np.uint8)
        self.remove_truth = np.asarray(self.remove_truth, dtype=np.uint8)


def simulate_growth_example(
    cloud: FeatureCloud,
    seed: int,
    step: int,
    theta: float,
    r_grow: float,
    rng: np.random.Generator,
    scene: int = 0,
    region: np.ndarray | None = None,
) -> TrainingExample:
    """Corrupted growth state ``step`` rounds after ``seed``.

    Draw order (fixed, so the simulation can be replayed): one uniform per
    true inlier in id order (drop if < theta, never the seed), then one per
    wrong-label point within ``r_grow`` of the true region in id order
    (inject if < theta).  ``region`` may pass a precomputed
    :func:`true_region`.
    """
    labels = cloud.labels
    if labels is None:
        raise ValueError("growth simulation needs a labelled cloud")
    if not 0 <= seed < len(cloud):
        raise IndexError(f"seed id {seed} out of range for {len(cloud)} points")
    if not 0.0 <= theta <= 0.5:
        raise ValueError("theta must lie in [0, 0.5]")
    graph = cloud.radius_graph(r_grow)
    truth = true_region(cloud, seed, step, r_grow) if region is None else region
    seed_label = labels[seed]
    keep = rng.random(len(truth)) >= theta
    keep[truth == seed] = True
    boundary = frontier(graph, truth)
    wrong = boundary[labels[boundary] != seed_label]
    inject = wrong[rng.random(len(wrong)) < theta]
    inliers = np.union1d(truth[keep], inject)
    reach = frontier(graph, inliers)
    is_in = np.zeros(len(cloud), dtype=bool)
    is_in[inliers] = True
    neighbors = reach[~is_in[reach]]
    return TrainingExample(
        seed=int(seed),
        step=int(step),
        theta=float(theta),
        inliers=inliers,
        neighbors=neighbors,
        add_truth=labels[neighbors] == seed_label,
        remove_truth=labels[inliers] != seed_label,
        scene=scene,
    )


def anneal_theta(epoch: int, total_epochs: int, theta_max: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return max(0.0, theta_max * (1.0 - epoch / total_epochs))


# -- augmentation --------------------------------------------------------------


def random_augmentation(rng: np.random.Generator) -> tuple[bool, bool, float]:
    flip_x = bool(rng.random() < 0.5)
    flip_y = bool(rng.random() < 0.5)
    angle = float(rng.uniform(0.0, 2 * np.pi))
    return flip_x, flip_y, angle


def apply_augmentation(points: np.ndarray, flip_x: bool, flip_y: bool, angle: float) -> np.ndarray:
    """Mirror x / y, then rotate about z; xyz, normalised xyz and normals move together."""
    out = np.array(points, copy=True)
    m = np.diag([-1.0 if flip_x else 1.0, -1.0 if flip_y else 1.0, 1.0])
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ m
    for cols in (XYZ, NXYZ, NORMAL):
        out[..., cols] = points[..., cols] @ rot.T.astype(points.dtype)
    return out


def augment(points: np.ndarray, rng: np.random.Generator, *more: np.ndarray):
    """Apply one random flip/rotation to ``points`` and any further arrays.

    Returns the augmented array, or a tuple when several are passed, so both
    branch sets of an example receive the identical transform.
    """
    params = random_augmentation(rng)
    outs = [apply_augmentation(p, *params) for p in (points, *more)]
    return outs[0] if not more else tuple(outs)


def example_rng(seed: int, *stream) -> np.random.Generator:
    """Independent generator for a (seed, epoch, example...) stream."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream)))


# -- dataset container ------------------------------------------------------------

_DS_MAGIC = b"RTXDSET\x00"
_DS_VERSION = 1


def save_dataset(path, examples: list[TrainingExample], header: dict) -> None:
    """Versioned binary record file; ``header`` (JSON) names the scene source."""
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_DS_MAGIC + struct.pack("<II", _DS_VERSION, len(head)) + head)
        fh.write(struct.pack("<I", len(examples)))
        for ex in examples:
            fh.write(struct.pack("<iqqdII", ex.scene, ex.seed, ex.step, ex.theta, len(ex.inliers), len(ex.neighbors)))
            fh.write(ex.inliers.astype("<i8").tobytes())
            fh.write(ex.neighbors.astype("<i8").tobytes())
            fh.write(ex.remove_truth.astype("u1").tobytes())
            fh.write(ex.add_truth.astype("u1").tobytes())


def load_dataset(path) -> tuple[list[TrainingExample], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_DS_MAGIC):
        raise ValueError(f"{path} is not a dataset file")
    off = len(_DS_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != _DS_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off += 8
    header = json.loads(data[off : off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    rec = struct.Struct("<iqqdII")
    out = []
    for _ in range(count):
        scene, seed, step, theta, ni, nn_ = rec.unpack_from(data, off)
        off += rec.size
        inl = np.frombuffer(data, "<i8", ni, off).copy()
        off += 8 * ni
        nbr = np.frombuffer(data, "<i8", nn_, off).copy()
        off += 8 * nn_
        rem = np.frombuffer(data, "u1", ni, off).copy()
        off += ni
        add = np.frombuffer(data, "u1", nn_, off).copy()
        off += nn_
        out.append(TrainingExample(seed, step, theta, inl, nbr, add, rem, scene))
    return out, header


def spec_to_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def spec_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    for k in ("room", "objects", "primitives", "size"):
        if k in d:
            d[k] = tuple(d[k])
    return SceneSpec(**d)
