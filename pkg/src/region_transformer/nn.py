"""Small dense-network substrate with hand-written backward passes.

Every layer exposes ``forward(x) -> (y, ctx)`` and ``backward(dy, ctx) -> dx``.
``forward`` never mutates the layer, so a parameter snapshot can serve
concurrent inference; ``backward`` accumulates into ``layer.grads``.
Inputs may carry any number of leading batch axes.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterator

import numpy as np

from .errors import FingerprintError

__all__ = [
    "Module",
    "Linear",
    "MLP",
    "relu",
    "relu_backward",
    "softmax",
    "softmax_rows",
    "softmax_backward",
    "sigmoid",
    "bce_dual_loss",
    "Adam",
    "adam_step",
    "grad_check",
    "save_checkpoint",
    "read_checkpoint",
    "PROB_CLAMP",
]

PROB_CLAMP = 1e-7


class Module:
    """Parameter container: own tensors in ``params``, sub-modules in ``children``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, g in self.grads.items():
            yield prefix + name, g
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def parameter_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def grad_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def zero_grad(self) -> None:
        for _, g in self.named_grads():
            g[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def astype(self, dtype) -> "Module":
        """Cast parameters and gradient buffers in place (keeps module identity)."""
        for name in list(self.params):
            self.params[name] = self.params[name].astype(dtype)
            self.grads[name] = np.zeros_like(self.params[name])
        for child in self.children.values():
            child.astype(dtype)
        return self

    @property
    def dtype(self):
        for _, p in self.named_parameters():
            return p.dtype
        return np.dtype(np.float64)

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        own = self.parameter_dict()
        missing = set(own) - set(values)
        extra = set(values) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            v = np.asarray(values[name])
            if v.size != p.size:
                raise ValueError(f"{name}: expected {p.shape}, got {v.shape}")
            p[...] = v.reshape(p.shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, bias: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        # fan-in uniform init (torch.nn.Linear default); He init saturates deep residual stacks
        bound = 1.0 / np.sqrt(d_in)
        self.add_param("weight", rng.uniform(-bound, bound, size=(d_out, d_in)))
        self.has_bias = bias
        if bias:
            self.add_param("bias", rng.uniform(-bound, bound, size=d_out))

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects last dim {self.d_in}, got {x.shape[-1]}")
        # one 2-D GEMM; `@` on stacked inputs would loop over small matrices
        y = x.reshape(-1, self.d_in) @ self.params["weight"].T
        if self.has_bias:
            y += self.params["bias"]
        return y.reshape(*x.shape[:-1], self.d_out), x

    def backward(self, dy: np.ndarray, x: np.ndarray, need_input_grad: bool = True):
        dy2 = dy.reshape(-1, self.d_out)
        self.grads["weight"] += dy2.T @ x.reshape(-1, self.d_in)
        if self.has_bias:
            # GEMV is several times faster than sum(axis=0) on tall, narrow arrays
            self.grads["bias"] += np.ones(len(dy2), dtype=dy2.dtype) @ dy2
        if not need_input_grad:
            return None
        return (dy2 @ self.params["weight"]).reshape(*dy.shape[:-1], self.d_in)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (y > 0)


class MLP(Module):
    """Linear layers with ReLU between them (and after the last if ``final_relu``)."""

    def __init__(self, dims, rng=None, final_relu: bool = False):
        super().__init__()
        dims = list(dims)
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [
            self.add_child(str(i), Linear(dims[i], dims[i + 1], rng)) for i in range(len(dims) - 1)
        ]
        self.final_relu = final_relu

    def forward(self, x):
        ctxs = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x, c = layer.forward(x)
            act = i < last or self.final_relu
            if act:
                x = np.maximum(x, 0.0, out=x)
            ctxs.append((c, x if act else None))
        return x, ctxs

    def backward(self, dy, ctxs, need_input_grad: bool = True):
        first = self.layers[0]
        for layer, (c, y) in zip(reversed(self.layers), reversed(ctxs)):
            if y is not None:
                dy = relu_backward(dy, y)
            dy = layer.backward(dy, c, need_input_grad or layer is not first)
        return dy


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def softmax_rows(t: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(t, dtype=np.result_type(t, np.float32)), axis=-1)


def softmax_backward(dw: np.ndarray, w: np.ndarray, axis: int = -1) -> np.ndarray:
    return w * (dw - (dw * w).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _bce_mean(pred, true, eps):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {true.shape}")
    if pred.size == 0:
        return 0.0, np.zeros_like(pred)
    p = np.clip(pred, eps, 1.0 - eps)
    count = pred.size
    loss = -np.mean(true * np.log(p) + (1.0 - true) * np.log1p(-p))
    grad = (p - true) / (p * (1.0 - p)) / count
    return float(loss), grad


def bce_dual_loss(add_pred, add_true, rem_pred, rem_true, eps: float = PROB_CLAMP):
    """Mean BCE over the add predictions plus mean BCE over the remove predictions.

    Returns ``(loss, d_loss/d_add_pred, d_loss/d_rem_pred)``.  Predictions are
    clamped to ``[eps, 1 - eps]``; the gradient is evaluated at the clamped
    value (straight through), so a confidently wrong output still receives a
    corrective signal.  An empty side contributes zero.
    """
    la, ga = _bce_mean(add_pred, add_true, eps)
    lr, gr = _bce_mean(rem_pred, rem_true, eps)
    return la + lr, ga, gr


class Adam:
    """Bias-corrected Adam acting in place on a dict of parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, blobs: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k][...] = blobs[f"adam.m.{k}"].reshape(self.m[k].shape)
            self.v[k][...] = blobs[f"adam.v.{k}"].reshape(self.v[k].shape)
        self.t = t


def adam_step(state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    if params is not state.params:
        raise ValueError("Adam state is bound to a different parameter dict")
    state.step(grads)
    return params


def grad_check(
    loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_and_grads`` re-evaluates the scalar loss from the live parameter
    arrays and returns fresh analytic gradients.  The relative error of an
    entry is ``|a - n| / max(|a|, |n|, floor)``.  ``max_per_param`` samples a
    random subset of entries from large tensors.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = loss_and_grads()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp, _ = loss_and_grads()
            flat[i] = old - h
            fm, _ = loss_and_grads()
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            a = g[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


# -- checkpoint container --------------------------------------------------

_MAGIC = b"RTXCKPT\x00"
_VERSION = 1


def save_checkpoint(path, blobs: dict[str, np.ndarray], fingerprint: str, meta: dict | None = None) -> None:
    """Write named float blobs as ``(name, rows, cols, little-endian f8 data)`` records."""
    fp = fingerprint.encode("utf-8")
    mt = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(fp)) + fp)
        fh.write(struct.pack("<I", len(mt)) + mt)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs.items():
            a = np.asarray(arr, dtype="<f8")
            rows, cols = (a.shape[0], int(np.prod(a.shape[1:]))) if a.ndim >= 2 else (a.size, 1)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(a.tobytes())


def read_checkpoint(path, expected_fingerprint: str | None = None):
    """Return ``(blobs, fingerprint, meta)``; raise FingerprintError on mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    off = len(_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    fingerprint = data[off : off + n].decode("utf-8")
    off += n
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintError(
            f"checkpoint architecture {fingerprint[:16]} does not match expected {expected_fingerprint[:16]}"
        )
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    blobs = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + n].decode("utf-8")
        off += n
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        size = rows * cols
        blobs[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(rows, cols).copy()
        off += 8 * size
    return blobs, fingerprint, meta
