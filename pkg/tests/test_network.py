import time

import numpy as np
import pytest

from helpers import tiny_network_config
from region_transformer.errors import FingerprintError
from region_transformer.network import (
    NetworkConfig,
    PointTransformerLayer,
    RegionNetwork,
    TransformerBlock,
    aggregate_rows,
    center_sets,
    network_forward,
    positional_encoding,
    resample_set,
    set_knn,
    transformer_block_forward,
    vector_attention_forward,
)
from region_transformer.nn import bce_dual_loss, grad_check, read_checkpoint, save_checkpoint
from region_transformer.pointcloud import XYZ


def mlp_oracle(module, v):
    """Apply an MLP's layers one vector at a time with plain loops over weights."""
    layers = module.layers
    for i, lin in enumerate(layers):
        w, b = lin.params["weight"], lin.params["bias"]
        v = np.array([sum(w[r, c] * v[c] for c in range(len(v))) + b[r] for r in range(w.shape[0])])
        if i < len(layers) - 1 or module.final_relu:
            v = np.maximum(v, 0)
    return v


def attention_oracle(layer, x, pos, nbr):
    """Direct double loop over points i and neighbours j of the vector attention rule."""
    wq = layer.phi.params["weight"]
    wk = layer.psi.params["weight"]
    wv = layer.alpha.params["weight"]
    n, k = nbr.shape
    out = np.zeros((n, layer.d_attn))
    for i in range(n):
        logits, values = [], []
        for jj in range(k):
            j = nbr[i, jj]
            delta = mlp_oracle(layer.beta, pos[i] - pos[j])
            logits.append(mlp_oracle(layer.gamma, wq @ x[i] - wk @ x[j] + delta))
            values.append(wv @ x[j] + delta)
        logits = np.array(logits)
        e = np.exp(logits - logits.max(axis=0))
        weights = e / e.sum(axis=0)
        for jj in range(k):
            out[i] += weights[jj] * values[jj]
    return out


def brute_set_knn(pos, k):
    n = len(pos)
    out = []
    for i in range(n):
        d = [(0.0 if j == i else float(((pos[i] - pos[j]) ** 2).sum()), 0 if j == i else 1, j) for j in range(n)]
        out.append([j for _, _, j in sorted(d)[:k]])
    return np.array(out)


class TestAttention:
    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        worst = 0.0
        for case in range(100):
            n = int(rng.integers(1, 9))
            k = int(rng.integers(1, min(4, n) + 1))
            d_in, d = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            layer = PointTransformerLayer(d_in, d, k, rng)
            x = rng.standard_normal((n, d_in))
            pos = rng.standard_normal((n, 3))
            nbr = np.stack([rng.permutation(n)[:k] for _ in range(n)])
            got = vector_attention_forward(layer, x, pos, nbr)
            worst = max(worst, float(np.abs(got - attention_oracle(layer, x, pos, nbr)).max()))
        assert worst < 1e-10
        assert time.perf_counter() - t0 < 5.0

    def test_weights_are_per_channel_distributions(self, rng):
        layer = PointTransformerLayer(4, 5, 3, rng)
        x, pos = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
        w = layer.attention_weights(x, pos, set_knn(pos, 3))
        assert w.shape == (6, 3, 5)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_positional_encoding_matches_beta(self, rng):
        layer = PointTransformerLayer(3, 4, 2, rng)
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        np.testing.assert_allclose(positional_encoding(layer, a, b), mlp_oracle(layer.beta, a - b), atol=1e-12)

    def test_out_of_range_neighbor(self, rng):
        layer = PointTransformerLayer(3, 4, 2, rng)
        with pytest.raises(IndexError):
            layer.forward(np.zeros((3, 3)), np.zeros((3, 3)), np.array([[0, 3], [1, 0], [2, 0]]))

    def test_batch_equals_loop(self, rng):
        layer = PointTransformerLayer(3, 4, 3, rng)
        x, pos = rng.standard_normal((2, 7, 3)), rng.standard_normal((2, 7, 3))
        nbr = set_knn(pos, 3)
        y = vector_attention_forward(layer, x, pos, nbr)
        for b in range(2):
            np.testing.assert_allclose(y[b], vector_attention_forward(layer, x[b], pos[b], nbr[b]), atol=1e-13)

    def test_layer_grad_check(self, rng):
        layer = PointTransformerLayer(4, 5, 3, rng)
        x, pos = rng.standard_normal((7, 4)), rng.standard_normal((7, 3))
        nbr = set_knn(pos, 3)
        up = rng.standard_normal((7, 5))

        def lg():
            layer.zero_grad()
            y, c = layer.forward(x, pos, nbr)
            layer.backward(up, c)
            return float((y * up).sum()), layer.grad_dict()

        assert grad_check(lg, layer.parameter_dict()) < 1e-4

    def test_block_grad_check_and_input_grad(self, rng):
        block = TransformerBlock(6, 4, 3, rng)
        x, pos = rng.standard_normal((8, 6)), rng.standard_normal((8, 3))
        nbr = set_knn(pos, 3)
        up = rng.standard_normal((8, 6))

        def lg():
            block.zero_grad()
            y, c = block.forward(x, pos, nbr)
            block.backward(up, c)
            return float((y * up).sum()), block.grad_dict()

        assert grad_check(lg, block.parameter_dict()) < 1e-4
        y, c = block.forward(x, pos, nbr)
        dx = block.backward(up, c)
        h = 1e-6
        for idx in [(0, 0), (3, 2), (7, 5)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num = ((transformer_block_forward(block, xp, pos, nbr) - transformer_block_forward(block, xm, pos, nbr)) * up).sum() / (2 * h)
            assert dx[idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


class TestSetKnn:
    def test_matches_brute(self, rng):
        pos = rng.random((20, 3))
        np.testing.assert_array_equal(set_knn(pos, 5), brute_set_knn(pos, 5))

    def test_self_first_with_duplicates(self):
        pos = np.zeros((5, 3))
        nbr = set_knn(pos, 3)
        np.testing.assert_array_equal(nbr[:, 0], np.arange(5))

    def test_k_clipped(self, rng):
        assert set_knn(rng.random((3, 3)), 16).shape == (3, 3)


class TestSets:
    def test_resample_large(self, rng):
        ids = np.arange(100, 200)
        feats = np.arange(300.0)[:, None] * np.ones(13)
        rows, back = resample_set(ids, feats, 32, rng)
        assert rows.shape == (32, 13) and len(np.unique(back)) == 32
        np.testing.assert_array_equal(rows[:, 0], back)

    def test_resample_small_covers_all(self, rng):
        ids = np.array([4, 9, 11])
        rows, back = resample_set(ids, np.zeros((20, 13)), 16, rng)
        assert set(back) == {4, 9, 11} and len(back) == 16

    def test_resample_empty(self, rng):
        with pytest.raises(ValueError):
            resample_set([], np.zeros((3, 13)), 4, rng)

    def test_aggregate_means(self):
        ids, means = aggregate_rows([1.0, 3.0, 5.0], [7, 7, 2])
        np.testing.assert_array_equal(ids, [2, 7])
        np.testing.assert_array_equal(means, [5.0, 2.0])
        _, ordered = aggregate_rows([1.0, 3.0], [7, 7], ids=[7, 8])
        assert ordered[0] == 2.0 and np.isnan(ordered[1])

    def test_center(self, rng):
        a, b = rng.random((5, 13)), rng.random((4, 13))
        ca, cb = center_sets(a, b)
        np.testing.assert_allclose(ca[:, XYZ].mean(0), 0, atol=1e-15)
        np.testing.assert_allclose(cb[:, XYZ] - b[:, XYZ], (ca[:, XYZ] - a[:, XYZ])[:4])
        np.testing.assert_array_equal(ca[:, 3:], a[:, 3:])


class TestRegionNetwork:
    def test_shapes_and_range(self, rng):
        cfg = tiny_network_config()
        net = RegionNetwork(cfg)
        xi, xn = rng.random((12, 13)), rng.random((12, 13))
        add, rem = network_forward(net, xi, xn)
        assert add.shape == rem.shape == (12,)
        assert np.all((add > 0) & (add < 1)) and np.all((rem > 0) & (rem < 1))
        with pytest.raises(ValueError):
            network_forward(net, rng.random((11, 13)), xn)

    def test_batched_equals_single(self, rng):
        net = RegionNetwork(tiny_network_config())
        xi, xn = rng.random((3, 12, 13)), rng.random((3, 12, 13))
        add, rem = network_forward(net, xi, xn)
        a1, r1 = network_forward(net, xi[1], xn[1])
        np.testing.assert_allclose(add[1], a1, atol=1e-13)
        np.testing.assert_allclose(rem[1], r1, atol=1e-13)

    @staticmethod
    def _loss_fn(cfg, seed):
        rng = np.random.default_rng(seed)
        net = RegionNetwork(cfg)
        xi, xn = rng.random((cfg.set_size, 13)), rng.random((cfg.set_size, 13))
        ta, tr = rng.integers(0, 2, cfg.set_size), rng.integers(0, 2, cfg.set_size)

        def lg():
            net.zero_grad()
            add, rem, ctx = net.forward(xi, xn)
            loss, ga, gr = bce_dual_loss(add, ta, rem, tr)
            net.backward(ga, gr, ctx)
            return loss, net.grad_dict()

        return net, lg

    @pytest.mark.parametrize("share", [False, True])
    def test_full_network_grad_check(self, share):
        net, lg = self._loss_fn(tiny_network_config(set_size=32, share_encoders=share), 11)
        assert grad_check(lg, net.parameter_dict(), max_per_param=6, rng=np.random.default_rng(0)) < 1e-3

    def test_relu_kink_explains_fd_outlier(self):
        # with these inputs one positional-encoding ReLU sits within 1e-5 of its kink,
        # so the h=1e-5 central difference is wrong while a smaller step agrees
        net, lg = self._loss_fn(tiny_network_config(set_size=32), 5)
        _, g = lg()
        name = "neighbor_b1.block0.attn.beta.1.bias"
        analytic = g[name][0]
        p = net.parameter_dict()[name]

        def fd(h):
            old = p[0]
            p[0] = old + h
            fp, _ = lg()
            p[0] = old - h
            fm, _ = lg()
            p[0] = old
            return (fp - fm) / (2 * h)

        assert abs(fd(1e-5) - analytic) / abs(analytic) > 1e-2
        assert abs(fd(1e-7) - analytic) / abs(analytic) < 1e-2

    def test_default_architecture(self):
        cfg = NetworkConfig()
        assert (cfg.b1, cfg.b2, cfg.b3, cfg.set_size, cfg.k_attn) == (
            (128, 128), (128, 256, 512, 1024), (512, 256, 128), 512, 16)
        h = cfg.halved()
        assert (h.b1, h.b2, h.b3) == ((64, 64), (64, 128, 256, 512), (256, 128, 64))

    def test_fingerprint(self, tmp_path):
        a, b = tiny_network_config(), tiny_network_config(k_attn=3)
        assert a.fingerprint() == tiny_network_config(seed=9).fingerprint()
        assert a.fingerprint() != b.fingerprint()
        net = RegionNetwork(a)
        save_checkpoint(tmp_path / "n.bin", net.parameter_dict(), net.fingerprint)
        with pytest.raises(FingerprintError):
            read_checkpoint(tmp_path / "n.bin", b.fingerprint())

    def test_seeded_init_deterministic(self):
        a = RegionNetwork(tiny_network_config(seed=3)).parameter_dict()
        b = RegionNetwork(tiny_network_config(seed=3)).parameter_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            NetworkConfig(b1=())
        with pytest.raises(ValueError):
            NetworkConfig(set_size=0)
