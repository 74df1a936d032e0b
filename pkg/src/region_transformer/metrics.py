"""Class-agnostic clustering and instance-matching scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "ContingencyTable",
    "contingency",
    "adjusted_rand_index",
    "mutual_info_scores",
    "normalized_mutual_info",
    "adjusted_mutual_info",
    "expected_mutual_info",
    "instance_prf_miou",
    "greedy_match",
    "evaluate",
]


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # (pred clusters, true clusters)

    @property
    def a(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def b(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def _check(pred, true):
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"label vectors differ in length: {len(pred)} vs {len(true)}")
    return pred, true


def contingency(pred, true) -> ContingencyTable:
    pred, true = _check(pred, true)
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(true, return_inverse=True)
    n_p = pi.max() + 1 if len(pi) else 0
    n_t = ti.max() + 1 if len(ti) else 0
    counts = np.zeros((n_p, n_t), dtype=np.int64)
    np.add.at(counts, (pi, ti), 1)
    return ContingencyTable(counts)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def adjusted_rand_index(pred, true) -> float:
    pred, true = _check(pred, true)
    if len(pred) < 2:
        raise ValueError("adjusted Rand index needs at least 2 points")
    t = contingency(pred, true)
    sum_ij = _comb2(t.counts).sum()
    sum_a = _comb2(t.a).sum()
    sum_b = _comb2(t.b).sum()
    expected = sum_a * sum_b / _comb2(t.n)
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if denom == 0:
        # both partitions are all-singletons or all-one-cluster
        return 1.0 if t.counts.shape[0] == t.counts.shape[1] else 0.0
    return float((sum_ij - expected) / denom)


def _entropy(sizes, n) -> float:
    p = sizes[sizes > 0] / n
    return float(-(p * np.log(p)).sum())


def _mutual_info(t: ContingencyTable) -> float:
    n = t.n
    i, j = np.nonzero(t.counts)
    nij = t.counts[i, j].astype(np.float64)
    a = t.a[i].astype(np.float64)
    b = t.b[j].astype(np.float64)
    mi = (nij / n * (np.log(nij) + np.log(n) - np.log(a) - np.log(b))).sum()
    return float(max(mi, 0.0))


def expected_mutual_info(a, b, n: int) -> float:
    """E[MI] of two random partitions with fixed cluster sizes (hypergeometric model)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    total = 0.0
    lg_n = gammaln(n + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term = nij / n * (np.log(n * nij) - np.log(ai * bj))
            log_p = (
                gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                - lg_n - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                - gammaln(n - ai - bj + nij + 1)
            )
            total += float((term * np.exp(log_p)).sum())
    return total


def mutual_info_scores(pred, true) -> tuple[float, float]:
    """(NMI, AMI) with arithmetic-mean entropy normalisation."""
    pred, true = _check(pred, true)
    t = contingency(pred, true)
    n = t.n
    if n == 0:
        return 1.0, 1.0
    k_p, k_t = t.counts.shape
    # identical-partition shortcut also covers the single-cluster/single-cluster case
    if k_p == k_t and np.count_nonzero(t.counts) == k_p:
        return 1.0, 1.0
    h_p = _entropy(t.a, n)
    h_t = _entropy(t.b, n)
    mi = _mutual_info(t)
    if h_p == 0.0 or h_t == 0.0:
        return 0.0, 0.0
    mean_h = 0.5 * (h_p + h_t)
    nmi = float(min(mi / mean_h, 1.0))
    emi = expected_mutual_info(t.a, t.b, n)
    denom = mean_h - emi
    if denom == 0:
        ami = 0.0
    else:
        ami = float((mi - emi) / denom)
    return nmi, ami


def normalized_mutual_info(pred, true) -> float:
    return mutual_info_scores(pred, true)[0]


def adjusted_mutual_info(pred, true) -> float:
    return mutual_info_scores(pred, true)[1]


def greedy_match(iou: np.ndarray, thresh: float) -> list[tuple[int, int]]:
    """Pairs (pred, true) taken by descending IoU; ties prefer lower pred, then lower true."""
    if iou.size == 0:
        return []
    p, q = np.nonzero(iou >= thresh)
    order = np.lexsort((q, p, -iou[p, q]))
    used_p: set[int] = set()
    used_t: set[int] = set()
    pairs = []
    for k in order:
        i, j = int(p[k]), int(q[k])
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append((i, j))
    return pairs


def instance_prf_miou(pred, true, iou_thresh: float = 0.5) -> tuple[float, float, float]:
    """Instance-level precision, recall and mIoU under greedy IoU matching.

    mIoU averages over ground-truth instances, scoring unmatched ones as 0,
    so it is not symmetric in its arguments.
    """
    t = contingency(pred, true)
    if t.n == 0:
        return 1.0, 1.0, 1.0
    inter = t.counts.astype(np.float64)
    union = t.a[:, None] + t.b[None, :] - inter
    iou = inter / union
    pairs = greedy_match(iou, iou_thresh)
    k_p, k_t = iou.shape
    precision = len(pairs) / k_p
    recall = len(pairs) / k_t
    miou = sum(iou[i, j] for i, j in pairs) / k_t
    return float(precision), float(recall), float(miou)


def evaluate(pred, true, iou_thresh: float = 0.5) -> dict:
    nmi, ami = mutual_info_scores(pred, true)
    precision, recall, miou = instance_prf_miou(pred, true, iou_thresh)
    ari = adjusted_rand_index(pred, true) if len(np.asarray(pred)) >= 2 else 1.0
    return {"ari": ari, "ami": ami, "nmi": nmi, "precision": precision, "recall": recall, "miou": miou}
