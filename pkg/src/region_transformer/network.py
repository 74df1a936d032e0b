"""Dual-branch point-transformer network predicting add/remove masks.

Layout, per branch (inlier set, neighbour set), each ``S x 13``::

    B1: [Linear -> ReLU -> TransformerBlock] per width      -> per-point code f1
    B2: [Linear -> ReLU -> TransformerBlock] per width      -> mean pool
    bottleneck = concat(pool(inlier), pool(neighbour))
    B3: Linear(concat(bottleneck, f1)) -> ReLU ... (shared by both branches)
    add head on neighbour rows, remove head on inlier rows, sigmoid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import MLP, PROB_CLAMP, Linear, Module, relu, relu_backward, sigmoid, softmax
from .pointcloud import FEATURE_DIM, NXYZ, XYZ

__all__ = [
    "NetworkConfig",
    "PointTransformerLayer",
    "TransformerBlock",
    "RegionNetwork",
    "positional_encoding",
    "vector_attention_forward",
    "transformer_block_forward",
    "network_forward",
    "set_knn",
    "resample_set",
    "aggregate_rows",
    "center_sets",
]


def _batched(a: np.ndarray, core_ndim: int):
    """Add a leading batch axis when ``a`` has only its core dimensions."""
    if a.ndim == core_ndim:
        return a[None], True
    return a, False


def set_knn(positions: np.ndarray, k: int) -> np.ndarray:
    """``(B, n, k)`` neighbour ids within each set; column 0 is the point itself.

    The selected columns are ordered by distance, then row index.  When
    several points tie at the k-th distance, which of them is kept is
    deterministic but not necessarily the smallest index.
    """
    pos, squeeze = _batched(np.asarray(positions), 2)
    n = pos.shape[1]
    k = min(k, n)
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    d2 = np.einsum("bijc,bijc->bij", diff, diff)
    idx = np.arange(n)
    d2[:, idx, idx] = -1.0  # duplicates from resampling must not displace self
    if k < n:
        part = np.argpartition(d2, k - 1, axis=-1)[:, :, :k]
    else:
        part = np.broadcast_to(idx, d2.shape).copy()
    order = np.lexsort((part, np.take_along_axis(d2, part, axis=-1)), axis=-1)
    nbr = np.take_along_axis(part, order, axis=-1)
    return nbr[0] if squeeze else nbr


class _Scatter:
    """Reverse of the neighbour gather: sums ``(B, n, k, D)`` rows back onto ``(B, n, D)``.

    Every row id occurs at least once (each point lists itself), so a sorted
    ``reduceat`` covers all targets.
    """

    def __init__(self, nbr: np.ndarray):
        b, n, k = nbr.shape
        flat = (nbr + (np.arange(b) * n)[:, None, None]).reshape(-1)
        self.order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=b * n)
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.shape = (b, n)

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        d = rows.shape[-1]
        flat = rows.reshape(-1, d)[self.order]
        return np.add.reduceat(flat, self.starts, axis=0).reshape(*self.shape, d)


def _gather(x: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    b, n = x.shape[:2]
    flat = nbr + (np.arange(b) * n)[:, None, None]
    # one flat take is about twice as fast as two-array fancy indexing
    return np.take(x.reshape(b * n, *x.shape[2:]), flat, axis=0)


class PointTransformerLayer(Module):
    """Local vector self-attention.

    For point ``i`` with neighbours ``j``::

        delta_ij = beta(p_i - p_j)
        w_ij     = softmax_j(gamma(phi(x_i) - psi(x_j) + delta_ij))   # per channel
        y_i      = sum_j w_ij * (alpha(x_j) + delta_ij)
    """

    def __init__(self, d_in: int, d_attn: int, k_attn: int = 16, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_attn, self.k_attn = d_in, d_attn, k_attn
        self.phi = self.add_child("phi", Linear(d_in, d_attn, rng, bias=False))
        self.psi = self.add_child("psi", Linear(d_in, d_attn, rng, bias=False))
        self.alpha = self.add_child("alpha", Linear(d_in, d_attn, rng, bias=False))
        self.beta = self.add_child("beta", MLP([3, d_attn, d_attn, d_attn], rng))
        self.gamma = self.add_child("gamma", MLP([d_attn, d_attn, d_attn], rng))

    def encode_positions(self, rel: np.ndarray):
        return self.beta.forward(rel)

    def forward(self, x, positions, nbr):
        x, squeeze = _batched(x, 2)
        positions, _ = _batched(positions, 2)
        nbr, _ = _batched(np.asarray(nbr), 2)
        n = x.shape[1]
        if nbr.shape[:2] != x.shape[:2]:
            raise ValueError(f"neighbour table {nbr.shape} does not match features {x.shape}")
        if nbr.size and (nbr.min() < 0 or nbr.max() >= n):
            raise IndexError("neighbour id out of range")
        q, _ = self.phi.forward(x)
        kf, _ = self.psi.forward(x)
        v, _ = self.alpha.forward(x)
        rel = positions[:, :, None, :] - _gather(positions, nbr)
        delta, bctx = self.beta.forward(rel.astype(x.dtype, copy=False))
        score = q[:, :, None, :] - _gather(kf, nbr) + delta
        logits, gctx = self.gamma.forward(score)
        w = softmax(logits, axis=2)
        value = _gather(v, nbr) + delta
        y = np.einsum("bnkd,bnkd->bnd", w, value)
        ctx = (x, nbr, bctx, gctx, w, value, y, squeeze)
        return (y[0] if squeeze else y), ctx

    def attention_weights(self, x, positions, nbr) -> np.ndarray:
        _, ctx = self.forward(x, positions, nbr)
        w = ctx[4]
        return w[0] if ctx[-1] else w

    def backward(self, dy, ctx):
        x, nbr, bctx, gctx, w, value, y, squeeze = ctx
        if squeeze:
            dy = dy[None]
        dvalue = dy[:, :, None, :] * w
        # softmax backward w * (dw - sum_k dw * w) with dw = dy * value; the sum is dy * y
        dlogits = dvalue * (value - y[:, :, None, :])
        dscore = self.gamma.backward(dlogits, gctx)
        self.beta.backward(dvalue + dscore, bctx, need_input_grad=False)
        scatter = _Scatter(nbr)
        dx = self.phi.backward(dscore.sum(axis=2), x)
        dx += self.psi.backward(scatter(-dscore), x)
        dx += self.alpha.backward(scatter(dvalue), x)
        return dx[0] if squeeze else dx


def positional_encoding(layer: PointTransformerLayer, p_i, p_j) -> np.ndarray:
    rel = np.asarray(p_i, dtype=layer.dtype) - np.asarray(p_j, dtype=layer.dtype)
    return layer.encode_positions(rel)[0]


def vector_attention_forward(layer: PointTransformerLayer, features, positions, neighbor_ids):
    return layer.forward(features, positions, neighbor_ids)[0]


class TransformerBlock(Module):
    """``x + out(attention(in(x)))``."""

    def __init__(self, d: int, d_attn: int | None = None, k_attn: int = 16, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        d_attn = d if d_attn is None else d_attn
        self.d = d
        self.lin_in = self.add_child("lin_in", Linear(d, d_attn, rng))
        self.attn = self.add_child("attn", PointTransformerLayer(d_attn, d_attn, k_attn, rng))
        self.lin_out = self.add_child("lin_out", Linear(d_attn, d, rng))

    def forward(self, x, positions, nbr):
        if x.shape[-1] != self.d:
            raise ValueError(f"block expects width {self.d}, got {x.shape[-1]}")
        h, c1 = self.lin_in.forward(x)
        a, c2 = self.attn.forward(h, positions, nbr)
        o, c3 = self.lin_out.forward(a)
        return x + o, (c1, c2, c3)

    def backward(self, dy, ctx):
        c1, c2, c3 = ctx
        da = self.lin_out.backward(dy, c3)
        dh = self.attn.backward(da, c2)
        return dy + self.lin_in.backward(dh, c1)


def transformer_block_forward(block: TransformerBlock, features, positions, neighbor_ids):
    return block.forward(features, positions, neighbor_ids)[0]


class Encoder(Module):
    """Stack of ``Linear -> ReLU -> [TransformerBlock]`` stages."""

    def __init__(self, d_in, widths, attention: bool, d_attn, k_attn, rng):
        super().__init__()
        self.stages = []
        self.input_grad = True
        for i, w in enumerate(widths):
            lin = self.add_child(f"lin{i}", Linear(d_in, w, rng))
            blk = self.add_child(f"block{i}", TransformerBlock(w, d_attn or w, k_attn, rng)) if attention else None
            self.stages.append((lin, blk))
            d_in = w

    def forward(self, x, positions, nbr):
        ctxs = []
        for lin, blk in self.stages:
            h, c1 = lin.forward(x)
            x = np.maximum(h, 0.0, out=h)
            c2 = None
            if blk is not None:
                x, c2 = blk.forward(x, positions, nbr)
            ctxs.append((c1, h, c2))
        return x, ctxs

    def backward(self, dy, ctxs):
        first = self.stages[0][0]
        for (lin, blk), (c1, h, c2) in zip(reversed(self.stages), reversed(ctxs)):
            if blk is not None:
                dy = blk.backward(dy, c2)
            dy = lin.backward(dy * (h > 0), c1, need_input_grad=lin is not first or self.input_grad)
        return dy


class BroadcastLinear(Module):
    """Linear map of ``concat(broadcast(z), f_i)`` without materialising the concatenation."""

    def __init__(self, d_z, d_f, d_out, rng):
        super().__init__()
        self.d_z, self.d_f, self.d_out = d_z, d_f, d_out
        bound = 1.0 / np.sqrt(d_z + d_f)
        self.add_param("weight", rng.uniform(-bound, bound, size=(d_out, d_z + d_f)))
        self.add_param("bias", rng.uniform(-bound, bound, size=d_out))

    def forward(self, z, f):
        w = self.params["weight"]
        wz, wf = w[:, : self.d_z], w[:, self.d_z :]
        y = (f.reshape(-1, self.d_f) @ wf.T).reshape(*f.shape[:-1], self.d_out)
        y += (z @ wz.T)[:, None, :]
        y += self.params["bias"]
        return y, (z, f)

    def backward(self, dy, ctx):
        z, f = ctx
        w = self.params["weight"]
        dsum = dy.sum(axis=1)
        g = self.grads["weight"]
        g[:, : self.d_z] += dsum.T @ z
        g[:, self.d_z :] += dy.reshape(-1, self.d_out).T @ f.reshape(-1, self.d_f)
        self.grads["bias"] += dsum.sum(axis=0)
        df = (dy.reshape(-1, self.d_out) @ w[:, self.d_z :]).reshape(*f.shape)
        return dsum @ w[:, : self.d_z], df


@dataclass(frozen=True)
class NetworkConfig:
    in_dim: int = FEATURE_DIM
    b1: tuple = (128, 128)
    b2: tuple = (128, 256, 512, 1024)
    b3: tuple = (512, 256, 128)
    set_size: int = 512
    k_attn: int = 16
    d_attn: int | None = None  # None: each stage attends at its own width
    b1_attention: bool = True
    b2_attention: bool = True
    share_encoders: bool = False
    seed: int = field(default=0, compare=False)

    def __post_init__(self):
        for name in ("b1", "b2", "b3"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
            if not getattr(self, name) or min(getattr(self, name)) < 1:
                raise ValueError(f"{name} widths must be positive and non-empty")
        if self.set_size < 1 or self.k_attn < 1 or self.in_dim < 1:
            raise ValueError("set_size, k_attn and in_dim must be positive")
        if self.d_attn is not None and self.d_attn < 1:
            raise ValueError("d_attn must be positive")

    def halved(self) -> "NetworkConfig":
        fields = asdict(self)
        for name in ("b1", "b2", "b3"):
            fields[name] = tuple(max(1, w // 2) for w in fields[name])
        return NetworkConfig(**fields)

    def architecture(self) -> dict:
        d = asdict(self)
        d.pop("seed")
        d.update({k: list(d[k]) for k in ("b1", "b2", "b3")})
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class RegionNetwork(Module):
    def __init__(self, config: NetworkConfig | None = None, rng=None):
        super().__init__()
        cfg = config or NetworkConfig()
        self.config = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)

        def encoders(tag):
            b1 = Encoder(cfg.in_dim, cfg.b1, cfg.b1_attention, cfg.d_attn, cfg.k_attn, rng)
            b1.input_grad = False  # network inputs are data
            b2 = Encoder(cfg.b1[-1], cfg.b2, cfg.b2_attention, cfg.d_attn, cfg.k_attn, rng)
            return self.add_child(f"{tag}_b1", b1), self.add_child(f"{tag}_b2", b2)

        self.inlier_b1, self.inlier_b2 = encoders("inlier")
        if cfg.share_encoders:
            self.neighbor_b1, self.neighbor_b2 = self.inlier_b1, self.inlier_b2
        else:
            self.neighbor_b1, self.neighbor_b2 = encoders("neighbor")
        self.dec_in = self.add_child("dec_in", BroadcastLinear(2 * cfg.b2[-1], cfg.b1[-1], cfg.b3[0], rng))
        self.dec = self.add_child("dec", MLP(cfg.b3, rng, final_relu=True)) if len(cfg.b3) > 1 else None
        self.add_head = self.add_child("add_head", Linear(cfg.b3[-1], 1, rng))
        self.remove_head = self.add_child("remove_head", Linear(cfg.b3[-1], 1, rng))

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def _branch(self, b1, b2, x):
        pos = x[..., NXYZ]
        nbr = set_knn(pos, self.config.k_attn)
        f1, c1 = b1.forward(x, pos, nbr)
        f2, c2 = b2.forward(f1, pos, nbr)
        return f1, f2.mean(axis=1), (c1, c2, f2.shape[1])

    def forward(self, inlier_set, neighbor_set):
        """Return ``(add_mask, remove_mask, ctx)``; masks are ``(S,)`` or ``(B, S)``."""
        s = self.config.set_size
        xi, squeeze = _batched(np.asarray(inlier_set, dtype=self.dtype), 2)
        xn, _ = _batched(np.asarray(neighbor_set, dtype=self.dtype), 2)
        for name, x in (("inlier", xi), ("neighbor", xn)):
            if x.shape[1:] != (s, self.config.in_dim):
                raise ValueError(f"{name} set must be ({s}, {self.config.in_dim}), got {x.shape[1:]}")
        if xi.shape[0] != xn.shape[0]:
            raise ValueError("inlier and neighbour batches differ in size")
        f1_i, pool_i, ci = self._branch(self.inlier_b1, self.inlier_b2, xi)
        f1_n, pool_n, cn = self._branch(self.neighbor_b1, self.neighbor_b2, xn)
        z = np.concatenate([pool_i, pool_n], axis=1)
        f = np.concatenate([f1_i, f1_n], axis=1)  # decoder is shared: run both branches at once
        h0, c_in = self.dec_in.forward(z, f)
        h = relu(h0)
        c_dec = None
        if self.dec is not None:
            h, c_dec = self.dec.forward(h)
        rem_logit, c_rh = self.remove_head.forward(h[:, :s])
        add_logit, c_ah = self.add_head.forward(h[:, s:])
        rem = sigmoid(rem_logit[..., 0])
        add = sigmoid(add_logit[..., 0])
        ctx = (ci, cn, c_in, h0, c_dec, c_rh, c_ah, add, rem, squeeze)
        if squeeze:
            return add[0], rem[0], ctx
        return add, rem, ctx

    def backward(self, d_add, d_rem, ctx) -> None:
        """Accumulate parameter gradients from d(loss)/d(mask probabilities).

        The sigmoid derivative is taken at the probability clamped to
        ``[PROB_CLAMP, 1 - PROB_CLAMP]``, matching the loss clamp.
        """
        ci, cn, c_in, h0, c_dec, c_rh, c_ah, add, rem, squeeze = ctx
        s = self.config.set_size
        d_add = np.asarray(d_add, dtype=add.dtype).reshape(add.shape)
        d_rem = np.asarray(d_rem, dtype=rem.dtype).reshape(rem.shape)
        pa = np.clip(add, PROB_CLAMP, 1 - PROB_CLAMP)
        pr = np.clip(rem, PROB_CLAMP, 1 - PROB_CLAMP)
        dh = np.empty((add.shape[0], 2 * s, self.config.b3[-1]), dtype=add.dtype)
        dh[:, :s] = self.remove_head.backward((d_rem * pr * (1 - pr))[..., None], c_rh)
        dh[:, s:] = self.add_head.backward((d_add * pa * (1 - pa))[..., None], c_ah)
        if self.dec is not None:
            dh = self.dec.backward(dh, c_dec)
        dz, df = self.dec_in.backward(relu_backward(dh, h0), c_in)
        w2 = self.config.b2[-1]
        for b1, b2, cb, dpool, df1 in (
            (self.inlier_b1, self.inlier_b2, ci, dz[:, :w2], df[:, :s]),
            (self.neighbor_b1, self.neighbor_b2, cn, dz[:, w2:], df[:, s:]),
        ):
            c1, c2, n = cb
            df2 = np.broadcast_to(dpool[:, None, :] / n, (dpool.shape[0], n, w2))
            df1 = df1 + b2.backward(np.ascontiguousarray(df2), c2)
            b1.backward(df1, c1)


def network_forward(net: RegionNetwork, inlier_set, neighbor_set):
    add, rem, _ = net.forward(inlier_set, neighbor_set)
    return add, rem


# -- set preparation ---------------------------------------------------------


def resample_set(ids, features: np.ndarray, size: int, rng: np.random.Generator):
    """Fixed-size rows for a variable-size id set.

    With at least ``size`` ids a subset is drawn without replacement;
    otherwise every id appears once and the remainder is filled with
    replacement.  Returns ``(rows, back_map)`` where ``back_map[r]`` is the
    source id of row ``r``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot resample an empty id set")
    if ids.size >= size:
        picked = rng.choice(ids, size=size, replace=False)
    else:
        extra = rng.choice(ids, size=size - ids.size, replace=True)
        picked = rng.permutation(np.concatenate([ids, extra]))
    return features[picked], picked


def aggregate_rows(values, back_map, ids=None):
    """Average duplicated rows per source id.

    Returns ``(unique_ids, means)``; with ``ids`` given, means are reported in
    that order and ids without any row get NaN.
    """
    values = np.asarray(values, dtype=np.float64)
    uniq, inv = np.unique(np.asarray(back_map), return_inverse=True)
    means = np.bincount(inv, weights=values) / np.bincount(inv)
    if ids is None:
        return uniq, means
    ids = np.asarray(ids)
    out = np.full(len(ids), np.nan)
    pos = np.searchsorted(uniq, ids)
    pos = np.clip(pos, 0, max(len(uniq) - 1, 0))
    hit = uniq[pos] == ids if len(uniq) else np.zeros(len(ids), bool)
    out[hit] = means[pos[hit]]
    return ids, out


def center_sets(inlier_rows: np.ndarray, neighbor_rows: np.ndarray):
    """Shift the raw-xyz columns of both sets by the inlier centroid."""
    c = inlier_rows[..., XYZ].mean(axis=-2, keepdims=True)
    a = inlier_rows.copy()
    b = neighbor_rows.copy()
    a[..., XYZ] -= c
    b[..., XYZ] -= c
    return a, b
