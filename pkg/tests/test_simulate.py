import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from region_transformer.pointcloud import NORMAL, NXYZ, XYZ, featurize
from region_transformer.simulate import (
    InfeasibleSceneError,
    SceneSpec,
    TrainingExample,
    anneal_theta,
    apply_augmentation,
    augment,
    frontier,
    generate_scene,
    load_dataset,
    save_dataset,
    simulate_growth_example,
    true_region,
)

R = 0.15


def adjacency(points, r):
    d2 = ((points[:, None] - points[None]) ** 2).sum(-1)
    return d2 <= r * r


def resimulate(points, labels, seed, step, theta, r, rng):
    """Independent replay: set-based growth over a dense adjacency matrix, same draw order."""
    adj = adjacency(points, r)
    own = labels[seed]
    region = {seed}
    for _ in range(step):
        new = {j for i in region for j in np.flatnonzero(adj[i]) if labels[j] == own} - region
        if not new:
            break
        region |= new
    truth = sorted(region)
    u = rng.random(len(truth))
    kept = [t for t, x in zip(truth, u) if x >= theta or t == seed]
    boundary = sorted({j for i in truth for j in np.flatnonzero(adj[i]) if labels[j] != own})
    v = rng.random(len(boundary))
    injected = [b for b, x in zip(boundary, v) if x < theta]
    inliers = sorted(set(kept) | set(injected))
    neighbors = sorted({j for i in inliers for j in np.flatnonzero(adj[i])} - set(inliers))
    return inliers, neighbors, len(truth) - len(kept), len(injected)


@pytest.fixture(scope="module")
def scene():
    spec = SceneSpec(room=(2.0, 2.0, 1.5), objects=(3, 3), density=150.0, spacing=0.1)
    return featurize(generate_scene(spec, np.random.default_rng(3)))


class TestGenerateScene:
    def test_floor_only(self):
        raw = generate_scene(SceneSpec(objects=(0, 0)), np.random.default_rng(0))
        assert set(np.unique(raw.labels)) == {0}

    def test_three_boxes_and_floor(self):
        spec = SceneSpec(objects=(3, 3), primitives=("box",))
        raw = generate_scene(spec, np.random.default_rng(1))
        assert len(np.unique(raw.labels)) == 4

    def test_reproducible(self):
        spec = SceneSpec()
        for s in range(50):
            a = generate_scene(spec, np.random.default_rng(s))
            b = generate_scene(spec, np.random.default_rng(s))
            assert a.positions.tobytes() == b.positions.tobytes()
            np.testing.assert_array_equal(np.bincount(a.labels), np.bincount(b.labels))

    def test_min_points_per_instance(self):
        spec = SceneSpec(density=5.0, objects=(4, 5), size=(0.25, 0.3), walls=True)
        for s in range(10):
            raw = generate_scene(spec, np.random.default_rng(s))
            assert np.bincount(raw.labels).min() >= 8

    def test_infeasible(self):
        spec = SceneSpec(room=(1.0, 1.0, 1.0), objects=(10, 10), size=(0.5, 0.6))
        with pytest.raises(InfeasibleSceneError):
            generate_scene(spec, np.random.default_rng(0))

    @pytest.mark.parametrize(
        "kw", [dict(room=(0, 1, 1)), dict(objects=(3, 2)), dict(primitives=("cone",)), dict(density=0.0)]
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SceneSpec(**kw)

    def test_lifted_objects_are_apart_from_floor(self):
        spec = SceneSpec(lift=0.3, objects=(2, 2))
        raw = generate_scene(spec, np.random.default_rng(4))
        floor = raw.labels == raw.labels.max()
        assert raw.positions[~floor, 2].min() > 0.25


class TestGrowthExample:
    def test_step_zero(self, scene):
        seed = 5
        ex = simulate_growth_example(scene, seed, 0, 0.0, R, np.random.default_rng(0))
        np.testing.assert_array_equal(ex.inliers, [seed])
        lab = scene.labels
        near = np.flatnonzero(adjacency(scene.positions, R)[seed])
        near = near[near != seed]
        np.testing.assert_array_equal(ex.neighbors, near)
        np.testing.assert_array_equal(ex.add_truth, lab[near] == lab[seed])

    def test_converged_matches_flood_fill(self, scene):
        lab = scene.labels
        adj = adjacency(scene.positions, R) & (lab[:, None] == lab[None, :])
        _, comp = connected_components(csr_matrix(adj), directed=False)
        for seed in (0, 50, 200, len(scene) - 1):
            ex = simulate_growth_example(scene, seed, 10_000, 0.0, R, np.random.default_rng(0))
            np.testing.assert_array_equal(ex.inliers, np.flatnonzero(comp == comp[seed]))
            assert not ex.remove_truth.any()
            if (comp[lab == lab[seed]] == comp[seed]).all():
                assert not ex.add_truth.any()

    def test_resimulation_oracle(self, scene):
        for seed, step in [(10, 3), (120, 7), (300, 20)]:
            ex = simulate_growth_example(scene, seed, step, 0.2, R, np.random.default_rng(seed))
            inl, nbr, dropped, injected = resimulate(
                scene.positions, scene.labels, seed, step, 0.2, R, np.random.default_rng(seed)
            )
            np.testing.assert_array_equal(ex.inliers, inl)
            np.testing.assert_array_equal(ex.neighbors, nbr)
            assert int(ex.remove_truth.sum()) == injected
            truth = true_region(scene, seed, step, R)
            assert len(truth) - int((1 - ex.remove_truth).sum()) == dropped

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), step=st.integers(0, 15), theta=st.floats(0.0, 0.5))
    def test_invariants(self, scene, seed, step, theta):
        seed = seed % len(scene)
        ex = simulate_growth_example(scene, seed, step, theta, R, np.random.default_rng(seed))
        lab = scene.labels
        assert np.intersect1d(ex.inliers, ex.neighbors).size == 0
        assert seed in ex.inliers
        np.testing.assert_array_equal(ex.add_truth, lab[ex.neighbors] == lab[seed])
        np.testing.assert_array_equal(ex.remove_truth, lab[ex.inliers] != lab[seed])
        # neighbours are exactly the radius ball of the inliers minus the inliers
        np.testing.assert_array_equal(ex.neighbors, np.setdiff1d(frontier(scene.radius_graph(R), ex.inliers), ex.inliers))

    def test_errors(self, scene):
        with pytest.raises(IndexError):
            simulate_growth_example(scene, len(scene), 1, 0.1, R, np.random.default_rng(0))
        with pytest.raises(ValueError):
            simulate_growth_example(scene, 0, 1, 0.6, R, np.random.default_rng(0))


class TestAnneal:
    def test_schedule(self):
        assert anneal_theta(0, 30, 0.2) == 0.2
        assert anneal_theta(29, 30, 0.2) == pytest.approx(0.2 / 30)
        assert abs(anneal_theta(15, 30, 0.2) - 0.1) <= 1 / 30

    def test_range(self):
        with pytest.raises(ValueError):
            anneal_theta(30, 30, 0.2)


class TestAugment:
    def rows(self, rng, n=20):
        r = rng.standard_normal((n, 13))
        r[:, NORMAL] /= np.linalg.norm(r[:, NORMAL], axis=1, keepdims=True)
        return r

    def test_identity(self, rng):
        r = self.rows(rng)
        np.testing.assert_array_equal(apply_augmentation(r, False, False, 0.0), r)

    def test_half_turn_twice_is_double_flip(self, rng):
        r = self.rows(rng)
        twice = apply_augmentation(apply_augmentation(r, False, False, np.pi), False, False, np.pi)
        np.testing.assert_allclose(twice, r, atol=1e-12)
        once = apply_augmentation(r, False, False, np.pi)
        np.testing.assert_allclose(once, apply_augmentation(r, True, True, 0.0), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_isometry(self, seed):
        rng = np.random.default_rng(seed)
        r = self.rows(rng)
        out = augment(r, rng)
        np.testing.assert_allclose(np.linalg.norm(out[:, NORMAL], axis=1), 1.0, atol=1e-12)
        d = lambda x: np.sqrt(((x[:, None, XYZ] - x[None, :, XYZ]) ** 2).sum(-1))  # noqa: E731
        np.testing.assert_allclose(d(out), d(r), atol=1e-9)
        np.testing.assert_array_equal(out[:, 3:6], r[:, 3:6])
        np.testing.assert_array_equal(out[:, 9], r[:, 9])

    def test_both_sets_same_transform(self, rng):
        a, b = self.rows(rng), self.rows(rng)
        ab = np.concatenate([a, b])
        oa, ob = augment(a, np.random.default_rng(1), b)
        np.testing.assert_allclose(np.concatenate([oa, ob]), augment(ab, np.random.default_rng(1)), atol=1e-15)
        # raw and normalised coordinates see the same rotation
        np.testing.assert_allclose(oa[:, NXYZ] - oa[:, XYZ], augment(a, np.random.default_rng(1))[:, NXYZ] - augment(a, np.random.default_rng(1))[:, XYZ])


def test_dataset_round_trip(tmp_path, scene):
    exs = [simulate_growth_example(scene, s, 4, 0.2, R, np.random.default_rng(s), scene=2) for s in (1, 9, 40)]
    save_dataset(tmp_path / "d.bin", exs, {"scene_seeds": [1, 2, 3]})
    back, header = load_dataset(tmp_path / "d.bin")
    assert header == {"scene_seeds": [1, 2, 3]}
    for a, b in zip(exs, back):
        assert (a.seed, a.step, a.theta, a.scene) == (b.seed, b.step, b.theta, b.scene)
        for f in ("inliers", "neighbors", "add_truth", "remove_truth"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    with pytest.raises(ValueError):
        (tmp_path / "bad").write_bytes(b"nope")
        load_dataset(tmp_path / "bad")


def test_training_example_dtypes():
    ex = TrainingExample(0, 1, 0.1, [0, 1], [2], [True], [False, True])
    assert ex.inliers.dtype == np.int64 and ex.add_truth.dtype == np.uint8
