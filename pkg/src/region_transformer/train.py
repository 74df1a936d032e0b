"""Training loop: simulated growth examples -> region network -> dual BCE -> Adam."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FingerprintError, NumericError
from .inference import THRESHOLD, MaskModel, NetworkMaskModel
from .network import NetworkConfig, RegionNetwork, center_sets, resample_set
from .nn import Adam, bce_dual_loss, read_checkpoint, save_checkpoint
from .pointcloud import FeatureCloud
from .simulate import (
    TrainingExample,
    anneal_theta,
    augment,
    example_rng,
    simulate_growth_example,
    true_region,
)

__all__ = [
    "TrainConfig",
    "ExampleSlot",
    "make_slots",
    "train",
    "train_step",
    "prepare_batch",
    "load_network",
    "save_training_checkpoint",
    "eval_masks",
    "mask_scores",
    "LOG_HEADER",
]

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "loss", "add_acc", "remove_acc", "theta"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 90
    examples_per_epoch: int | None = None  # None: every slot once per epoch
    batch_size: int = 16
    lr: float = 1e-3
    theta_max: float = 0.2
    r_grow: float = 0.15
    seed: int = 0
    checkpoint_every: int = 1
    dtype: str = "float32"
    augment: bool = True
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size and checkpoint_every must be positive")
        if self.examples_per_epoch is not None and self.examples_per_epoch < 1:
            raise ValueError("examples_per_epoch must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.theta_max <= 0.5:
            raise ValueError("theta_max must lie in [0, 0.5]")
        if self.r_grow <= 0:
            raise ValueError("r_grow must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = {**self.network.architecture(), "seed": self.network.seed}
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        net = d.pop("network", None)
        return TrainConfig(**d, network=NetworkConfig(**net) if net is not None else NetworkConfig())


@dataclass(frozen=True)
class ExampleSlot:
    """What stays fixed about a training example across epochs."""

    scene: int
    seed: int
    step: int


def make_slots(clouds: list[FeatureCloud], per_scene: int, max_step: int, rng: np.random.Generator):
    """Random seeds and growth steps in ``[0, max_step]``, scene-major order.

    On labelled clouds the seed's instance is drawn uniformly first, so small
    objects are not drowned out by the floor; otherwise seeds are uniform.
    """
    slots = []
    for s, cloud in enumerate(clouds):
        labels = cloud.labels
        if labels is None:
            seeds = rng.integers(0, len(cloud), size=per_scene)
        else:
            uniq, inv = np.unique(labels, return_inverse=True)
            members = np.split(np.argsort(inv, kind="stable"), np.cumsum(np.bincount(inv))[:-1])
            inst = rng.integers(0, len(uniq), size=per_scene)
            seeds = np.array([members[i][rng.integers(len(members[i]))] for i in inst], dtype=np.int64)
        steps = rng.integers(0, max_step + 1, size=per_scene)
        slots.extend(ExampleSlot(s, int(a), int(b)) for a, b in zip(seeds, steps))
    return slots


def prepare_batch(examples, clouds, size: int, rng: np.random.Generator, dtype, do_augment: bool = True):
    """Resampled, centred (and augmented) row tensors plus row-level targets."""
    xi, xn, ti, tn = [], [], [], []
    for ex in examples:
        feats = clouds[ex.scene].features
        ri, mi = resample_set(ex.inliers, feats, size, rng)
        rn, mn = resample_set(ex.neighbors, feats, size, rng)
        ri, rn = center_sets(ri, rn)
        if do_augment:
            ri, rn = augment(ri, rng, rn)
        pos_i = np.searchsorted(ex.inliers, mi)
        pos_n = np.searchsorted(ex.neighbors, mn)
        xi.append(ri)
        xn.append(rn)
        ti.append(ex.remove_truth[pos_i])
        tn.append(ex.add_truth[pos_n])
    return (
        np.stack(xi).astype(dtype),
        np.stack(xn).astype(dtype),
        np.stack(ti).astype(np.float64),
        np.stack(tn).astype(np.float64),
    )


def train_step(net: RegionNetwork, opt: Adam | None, xi, xn, t_rem, t_add):
    """One accumulated update over a batch; returns (mean loss, add rows correct, remove rows correct).

    The batch loss is the mean of the per-example dual BCE, so its gradient
    equals gradient accumulation over single-example steps.
    """
    add, rem, ctx = net.forward(xi, xn)
    b = len(xi)
    d_add = np.empty_like(add, dtype=np.float64)
    d_rem = np.empty_like(rem, dtype=np.float64)
    losses = np.empty(b)
    for e in range(b):
        losses[e], d_add[e], d_rem[e] = bce_dual_loss(add[e], t_add[e], rem[e], t_rem[e])
    if opt is not None:
        net.zero_grad()
        net.backward(d_add / b, d_rem / b, ctx)
        opt.step(net.grad_dict())
    return losses, (add > THRESHOLD) == (t_add > 0.5), (rem > THRESHOLD) == (t_rem > 0.5)


def save_training_checkpoint(path, net: RegionNetwork, opt: Adam, config: TrainConfig, epoch: int) -> None:
    blobs = dict(net.parameter_dict())
    blobs.update(opt.state())
    meta = {"epoch": epoch, "adam_t": opt.t, "config": config.to_dict()}
    tmp = f"{os.fspath(path)}.tmp"
    save_checkpoint(tmp, blobs, net.fingerprint, meta)
    os.replace(tmp, path)


def load_network(path, config: NetworkConfig | None = None, dtype=None):
    """Rebuild the network stored at ``path``; returns ``(net, meta, blobs)``.

    With ``config`` given, the checkpoint must carry the same architecture
    fingerprint.
    """
    expected = config.fingerprint() if config is not None else None
    blobs, fingerprint, meta = read_checkpoint(path, expected)
    cfg = config
    if cfg is None:
        stored = meta.get("config", {}).get("network")
        if stored is None:
            raise FingerprintError(f"checkpoint {path} does not record its network configuration")
        cfg = NetworkConfig(**stored)
        if cfg.fingerprint() != fingerprint:
            raise FingerprintError(f"checkpoint {path} has an inconsistent architecture record")
    dtype = dtype or meta.get("config", {}).get("dtype", "float64")
    net = RegionNetwork(cfg).astype(dtype)
    net.load_parameters({k: v for k, v in blobs.items() if not k.startswith("adam.")})
    return net, meta, blobs


def _write_log_row(path, row, fresh: bool):
    mode = "w" if fresh else "a"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(LOG_HEADER)
        w.writerow(row)


def train(
    config: TrainConfig,
    clouds: list[FeatureCloud],
    slots: list[ExampleSlot],
    checkpoint_path,
    log_path=None,
    resume: bool = False,
    progress=None,
) -> RegionNetwork:
    """Train from scratch (or resume) and return the network.

    Each epoch re-simulates every slot at the annealed mistake probability
    with a generator keyed by (seed, epoch, slot), so runs are reproducible
    and resumable.  A CSV row is written per epoch and a checkpoint every
    ``checkpoint_every`` epochs and after the last one.
    """
    if not slots:
        raise ValueError("no training slots")
    net = RegionNetwork(config.network).astype(config.dtype)
    opt = Adam(net.parameter_dict(), lr=config.lr)
    start = 0
    if resume:
        net, meta, blobs = load_network(checkpoint_path, config.network, config.dtype)
        opt = Adam(net.parameter_dict(), lr=config.lr)
        opt.load_state(blobs, int(meta["adam_t"]))
        start = int(meta["epoch"]) + 1
    regions = {}
    n_slots = len(slots)
    per_epoch = config.examples_per_epoch or n_slots
    s = config.network.set_size
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        theta = anneal_theta(epoch, config.epochs, config.theta_max)
        order_rng = example_rng(config.seed, epoch)
        picks = np.arange(n_slots) if per_epoch == n_slots else order_rng.integers(0, n_slots, size=per_epoch)
        picks = order_rng.permutation(picks)
        losses, add_hits, rem_hits = [], [], []
        batch: list[TrainingExample] = []
        batch_no = 0

        def flush():
            nonlocal batch_no
            rng = example_rng(config.seed, epoch, 1_000_000_000 + batch_no)
            xi, xn, ti, tn = prepare_batch(batch, clouds, s, rng, net.dtype, config.augment)
            lo, ah, rh = train_step(net, opt, xi, xn, ti, tn)
            if not np.all(np.isfinite(lo)):
                raise NumericError(f"non-finite loss in epoch {epoch} batch {batch_no}")
            bad = [p for n, p in net.named_parameters() if not np.all(np.isfinite(p))]
            if bad:
                raise NumericError(f"non-finite parameters after epoch {epoch} batch {batch_no}")
            losses.extend(lo)
            add_hits.append(ah.ravel())
            rem_hits.append(rh.ravel())
            batch.clear()
            batch_no += 1

        for idx in picks:
            slot = slots[int(idx)]
            cloud = clouds[slot.scene]
            key = (slot.scene, slot.seed, slot.step)
            if key not in regions:
                regions[key] = true_region(cloud, slot.seed, slot.step, config.r_grow)
            rng = example_rng(config.seed, epoch, int(idx))
            ex = simulate_growth_example(
                cloud, slot.seed, slot.step, theta, config.r_grow, rng, scene=slot.scene, region=regions[key]
            )
            if ex.neighbors.size == 0:
                continue
            batch.append(ex)
            if len(batch) == config.batch_size:
                flush()
        if batch:
            flush()
        if not losses:
            raise ValueError("every example in the epoch had an empty neighbour set")
        row = [
            epoch,
            f"{float(np.mean(losses)):.6f}",
            f"{float(np.concatenate(add_hits).mean()):.6f}",
            f"{float(np.concatenate(rem_hits).mean()):.6f}",
            f"{theta:.6f}",
        ]
        if log_path is not None:
            _write_log_row(log_path, row, fresh=(epoch == 0 or not os.path.exists(log_path)))
        if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
            save_training_checkpoint(checkpoint_path, net, opt, config, epoch)
        log.info("epoch %d loss %s add_acc %s remove_acc %s theta %s (%.1fs)", *row, time.perf_counter() - t0)
        if progress is not None:
            progress(epoch, row)
    return net


# -- mask validation ---------------------------------------------------------------


def mask_scores(pred: np.ndarray, truth: np.ndarray) -> dict:
    """Precision, recall and accuracy of binary masks; empty denominators score 1 only if vacuous."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    n = pred.size
    return {
        "precision": tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0),
        "recall": tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0),
        "accuracy": float(np.sum(pred == truth)) / n if n else 1.0,
        "count": n,
    }


def eval_masks(model: MaskModel, examples: list[TrainingExample], clouds, seed: int = 0) -> dict:
    """Score a mask model on examples; masks are binarised at 0.5 with ties excluded."""
    if isinstance(model, RegionNetwork):
        model = NetworkMaskModel(model)
    rng = np.random.default_rng(seed)
    add_p, add_t, rem_p, rem_t = [], [], [], []
    for ex in examples:
        if ex.neighbors.size == 0:
            continue
        pa, pr = model.predict_masks(clouds[ex.scene], ex.seed, ex.inliers, ex.neighbors, rng)
        add_p.append(np.asarray(pa) > THRESHOLD)
        rem_p.append(np.asarray(pr) > THRESHOLD)
        add_t.append(ex.add_truth.astype(bool))
        rem_t.append(ex.remove_truth.astype(bool))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, bool)  # noqa: E731
    return {"add": mask_scores(cat(add_p), cat(add_t)), "remove": mask_scores(cat(rem_p), cat(rem_t))}
