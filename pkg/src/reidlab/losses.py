"""Triplet-loss family and label-smoothed cross-entropy.

All triplet losses operate on a batch-wise pairwise distance matrix and
treat every row as an anchor once.  Four variants are provided:

* ``naive``       hinge over every (anchor, positive, negative) triplet
* ``batch-hard``  hinge over the farthest positive / nearest negative
* ``batch-soft``  hinge over softmax-weighted positive/negative sums
* ``soft-margin`` softplus over the weighted sums; no margin parameter

All functions are pure in their inputs and safe to evaluate concurrently
on distinct batches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, clamp_min, divide, exp, matmul, multiply,
                       relu, reshape, softplus, sqrt, subtract, tensor_mean,
                       tensor_sum, transpose)

_DIST_FLOOR = 1e-12
DISTANCES = ("euclidean", "squared-euclidean")
VARIANTS = ("naive", "batch-hard", "batch-soft", "soft-margin")


@dataclass
class EmbeddingBatch:
    """Row-vector embeddings with per-row identity and camera labels."""
    embeddings: Tensor
    ids: np.ndarray
    cams: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if self.ids.shape[0] != self.embeddings.shape[0]:
            raise ValueError(
                f"ids length {self.ids.shape[0]} does not match "
                f"{self.embeddings.shape[0]} embedding rows")
        if self.cams is not None:
            self.cams = np.asarray(self.cams)


@dataclass
class TripletConfig:
    variant: str = "soft-margin"
    margin: float = 0.3
    distance: str = "euclidean"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown triplet variant {self.variant!r}")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass
class SmoothingConfig:
    epsilon: float
    num_classes: int

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"smoothing epsilon must be in [0, 1), got {self.epsilon}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    def target_distribution(self, targets) -> np.ndarray:
        """Rows sum to 1: (1 - eps) on the true class, eps/(C-1) elsewhere."""
        targets = np.asarray(targets, dtype=int)
        c = self.num_classes
        if np.any((targets < 0) | (targets >= c)):
            raise ValueError("targets out of range [0, num_classes)")
        if c == 1:
            return np.ones((targets.size, 1))
        q = np.full((targets.size, c), self.epsilon / (c - 1))
        q[np.arange(targets.size), targets] = 1.0 - self.epsilon
        return q


# ---------------------------------------------------------------------------
# distances

def pairwise_distances(batch, distance: str = "euclidean") -> Tensor:
    """Symmetric zero-diagonal distance matrix, differentiable in the rows.

    Squared distances are clamped at a small floor before the square root
    so coincident points keep a finite gradient; entries at or below the
    floor (including the diagonal) are masked to an exact zero.
    """
    x = batch.embeddings if isinstance(batch, EmbeddingBatch) else batch
    if distance not in DISTANCES:
        raise ValueError(f"unknown distance {distance!r}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("pairwise_distances needs at least 2 rows")

    gram = matmul(x, transpose(x))
    sq = tensor_sum(multiply(x, x), axis=1, keepdims=True)  # (n, 1)
    d2 = subtract(sq + transpose(sq), multiply(gram, 2.0))
    d2 = multiply(d2 + transpose(d2), 0.5)  # force exact symmetry

    off_diag = 1.0 - np.eye(n)
    if distance == "squared-euclidean":
        return multiply(clamp_min(d2, 0.0), off_diag)
    keep = off_diag * (d2.values > _DIST_FLOOR)
    return multiply(sqrt(clamp_min(d2, _DIST_FLOOR)), keep)


def positive_negative_masks(ids) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (B, B) masks of same-identity (excluding self) and
    different-identity pairs; every anchor must have at least one of each."""
    ids = np.asarray(ids)
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(ids.size, dtype=bool)
    neg = ~same
    for a in range(ids.size):
        if not pos[a].any():
            raise ValueError(f"anchor {a} has no positive sample in batch")
        if not neg[a].any():
            raise ValueError(f"anchor {a} has no negative sample in batch")
    return pos, neg


# ---------------------------------------------------------------------------
# triplet variants

def triplet_naive(d_ap, d_an, margin: float) -> Tensor:
    """Hinge triplet loss [margin + d_ap - d_an]_+ (elementwise)."""
    return relu(subtract(d_ap, d_an) + margin)


def batch_hard_pre_hinge(distmat: Tensor, ids, margin: float) -> Tensor:
    """Per-anchor margin + max positive distance - min negative distance.

    Gradient flows only through the selected hard pair of each anchor.
    """
    pos, neg = positive_negative_masks(ids)
    d = distmat.values
    hard_p = np.where(pos, d, -np.inf).argmax(axis=1)
    hard_n = np.where(neg, d, np.inf).argmin(axis=1)
    rows = np.arange(d.shape[0])
    return subtract(distmat[rows, hard_p], distmat[rows, hard_n]) + margin


def triplet_batch_hard(distmat: Tensor, ids, margin: float) -> Tensor:
    return tensor_mean(relu(batch_hard_pre_hinge(distmat, ids, margin)))


def batch_soft_weights(distmat: Tensor, ids) -> tuple[Tensor, Tensor]:
    """Adaptive per-anchor weights: softmax of +d over positives and of -d
    over negatives.  Rows of each weight matrix sum to one over their mask.

    The softmax is shift-stabilized per anchor; shift invariance makes the
    result identical to the unshifted form.
    """
    pos, neg = positive_negative_masks(ids)
    d = distmat.values

    shift_p = np.where(pos, d, -np.inf).max(axis=1, keepdims=True)
    ep = multiply(exp(subtract(distmat, shift_p)), pos.astype(float))
    w_pos = divide(ep, tensor_sum(ep, axis=1, keepdims=True))

    shift_n = np.where(neg, -d, -np.inf).max(axis=1, keepdims=True)
    en = multiply(exp(subtract(multiply(distmat, -1.0), shift_n)), neg.astype(float))
    w_neg = divide(en, tensor_sum(en, axis=1, keepdims=True))
    return w_pos, w_neg


def batch_soft_pre_hinge(distmat: Tensor, ids, margin: float) -> Tensor:
    """Per-anchor margin + weighted positive sum - weighted negative sum."""
    w_pos, w_neg = batch_soft_weights(distmat, ids)
    pos_term = tensor_sum(multiply(w_pos, distmat), axis=1)
    neg_term = tensor_sum(multiply(w_neg, distmat), axis=1)
    return subtract(pos_term, neg_term) + margin


def triplet_batch_soft(distmat: Tensor, ids, margin: float) -> Tensor:
    return tensor_mean(relu(batch_soft_pre_hinge(distmat, ids, margin)))


def triplet_soft_margin(distmat: Tensor, ids) -> Tensor:
    """Softplus of the weighted positive/negative gap; strictly positive and
    with a nonzero gradient even on fully separated batches."""
    return tensor_mean(softplus(batch_soft_pre_hinge(distmat, ids, 0.0)))


def triplet_batch_all(distmat: Tensor, ids, margin: float) -> Tensor:
    """The naive hinge averaged over every valid (a, p, n) triplet."""
    pos, neg = positive_negative_masks(ids)
    n = distmat.shape[0]
    d_ap = reshape(distmat, (n, n, 1))
    d_an = reshape(distmat, (n, 1, n))
    hinge = triplet_naive(d_ap, d_an, margin)
    valid = (pos[:, :, None] & neg[:, None, :]).astype(float)
    return multiply(tensor_sum(multiply(hinge, valid)), 1.0 / valid.sum())


def triplet_loss(distmat: Tensor, ids, cfg: TripletConfig) -> Tensor:
    """Dispatch on the configured variant; soft-margin never reads the margin."""
    if cfg.variant == "naive":
        return triplet_batch_all(distmat, ids, cfg.margin)
    if cfg.variant == "batch-hard":
        return triplet_batch_hard(distmat, ids, cfg.margin)
    if cfg.variant == "batch-soft":
        return triplet_batch_soft(distmat, ids, cfg.margin)
    return triplet_soft_margin(distmat, ids)


# ---------------------------------------------------------------------------
# classification branch

def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable log softmax via a detached max shift."""
    shift = logits.values.max(axis=axis, keepdims=True)
    z = subtract(logits, shift)
    lse = tensor_sum(exp(z), axis=axis, keepdims=True)
    from .autodiff import log as _log
    return subtract(z, _log(lse))


def cross_entropy_smoothed(logits: Tensor, targets, cfg: SmoothingConfig) -> Tensor:
    """Mean over the batch of -sum_c q_c log softmax(logits)_c with the
    smoothed target distribution q."""
    if logits.values.ndim != 2 or logits.shape[1] != cfg.num_classes:
        raise ValueError(
            f"logits shape {logits.shape} does not match {cfg.num_classes} classes")
    q = cfg.target_distribution(targets)
    if q.shape[0] != logits.shape[0]:
        raise ValueError("targets length does not match logits rows")
    lsm = log_softmax(logits, axis=1)
    per_row = multiply(tensor_sum(multiply(lsm, q), axis=1), -1.0)
    return tensor_mean(per_row)
