"""Canned finite-difference checks covering every registered operator,
the four triplet losses, generalized-mean pooling, and smoothed
cross-entropy.

Each case builds a deterministic scalar function of leaf tensors from a
seed.  Inputs are conditioned away from kinks (relu corners, hinge zeros,
hard-selection ties) because central differences are meaningless exactly
on them; the screening is deterministic, so a given seed always yields
the same accepted instance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, finite_diff_check
from .losses import (SmoothingConfig, cross_entropy_smoothed,
                     pairwise_distances, triplet_batch_all,
                     triplet_batch_hard, triplet_batch_soft, triplet_naive,
                     triplet_soft_margin, positive_negative_masks)
from .pooling import GemLayer, gem_pool

BuildResult = tuple[Callable[..., Tensor], list[Tensor], list[str]]


@dataclass(frozen=True)
class CheckCase:
    name: str
    build: Callable[[int], BuildResult]


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _weighted_sum(op, weight: np.ndarray):
    def f(*leaves):
        return ad.tensor_sum(ad.multiply(op(*leaves), weight))
    return f


def _leaf(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# elementary op cases

def _case_binary(op, low=-1.0, high=1.0, positive_b=False):
    def build(seed: int) -> BuildResult:
        rng = _rng(seed)
        a = _leaf(rng.uniform(low, high, (3, 4)))
        b_vals = rng.uniform(0.5, 1.5, (3, 4)) if positive_b else rng.uniform(low, high, (3, 4))
        b = _leaf(b_vals)
        c = rng.uniform(-1, 1, (3, 4))
        return _weighted_sum(op, c), [a, b], ["a", "b"]
    return build


def _case_unary(op, low, high, shape=(3, 4)):
    def build(seed: int) -> BuildResult:
        rng = _rng(seed)
        x = _leaf(rng.uniform(low, high, shape))
        c = rng.uniform(-1, 1, shape)
        return _weighted_sum(op, c), [x], ["x"]
    return build


def _build_matmul(seed: int) -> BuildResult:
    rng = _rng(seed)
    a = _leaf(rng.uniform(-1, 1, (3, 4)))
    b = _leaf(rng.uniform(-1, 1, (4, 2)))
    c = rng.uniform(-1, 1, (3, 2))
    return _weighted_sum(ad.matmul, c), [a, b], ["a", "b"]


def _build_relu(seed: int) -> BuildResult:
    rng = _rng(seed)
    mag = rng.uniform(0.1, 1.0, (3, 4))
    sign = np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0)
    x = _leaf(mag * sign)
    c = rng.uniform(-1, 1, (3, 4))
    return _weighted_sum(ad.relu, c), [x], ["x"]


def _build_power_scalar(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(0.5, 2.0, (3, 4)))
    c = rng.uniform(-1, 1, (3, 4))
    return _weighted_sum(lambda t: ad.power(t, 2.7), c), [x], ["x"]


def _build_power_learnable(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(0.5, 2.0, (4, 5)))
    p = _leaf(rng.uniform(1.0, 3.0, (4, 1)))
    c = rng.uniform(-1, 1, (4, 5))
    return _weighted_sum(ad.power, c), [x, p], ["x", "p"]


def _build_clamp(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(0.5, 2.0, (3, 4)))
    c = rng.uniform(-1, 1, (3, 4))
    return _weighted_sum(lambda t: ad.clamp_min(t, 0.1), c), [x], ["x"]


def _build_sum_axis(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(-1, 1, (3, 4)))
    c = rng.uniform(-1, 1, (3,))
    return _weighted_sum(lambda t: ad.tensor_sum(t, axis=1), c), [x], ["x"]


def _build_mean_axis(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(-1, 1, (3, 4)))
    c = rng.uniform(-1, 1, (4,))
    return _weighted_sum(lambda t: ad.tensor_mean(t, axis=0), c), [x], ["x"]


def _build_reshape(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(-1, 1, (3, 4)))
    c = rng.uniform(-1, 1, (6, 2))
    return _weighted_sum(lambda t: ad.reshape(t, (6, 2)), c), [x], ["x"]


def _build_transpose(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(-1, 1, (3, 4)))
    c = rng.uniform(-1, 1, (4, 3))
    return _weighted_sum(ad.transpose, c), [x], ["x"]


def _build_concat(seed: int) -> BuildResult:
    rng = _rng(seed)
    a = _leaf(rng.uniform(-1, 1, (2, 3)))
    b = _leaf(rng.uniform(-1, 1, (4, 3)))
    c = rng.uniform(-1, 1, (6, 3))
    return _weighted_sum(lambda u, v: ad.concat([u, v], axis=0), c), [a, b], ["a", "b"]


def _build_gather(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(-1, 1, (5, 6)))
    rows = rng.integers(0, 5, 8)
    cols = rng.integers(0, 6, 8)  # repeats exercise scatter-add
    c = rng.uniform(-1, 1, (8,))
    return _weighted_sum(lambda t: t[rows, cols], c), [x], ["x"]


def _build_softmax(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(-2, 2, (4, 5)))
    c = rng.uniform(-1, 1, (4, 5))
    return _weighted_sum(lambda t: ad.softmax(t, axis=1), c), [x], ["x"]


def _build_l2_normalize(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _leaf(rng.uniform(0.2, 1.0, (4, 5)) * np.where(rng.random((4, 5)) < 0.5, -1, 1))
    c = rng.uniform(-1, 1, (4, 5))
    return _weighted_sum(lambda t: ad.l2_normalize(t, axis=1), c), [x], ["x"]


# ---------------------------------------------------------------------------
# loss and pooling cases

def _pk_ids(num_ids: int, per_id: int) -> np.ndarray:
    return np.repeat(np.arange(num_ids), per_id)


def _embedding_leaf(rng, rows: int, dim: int) -> Tensor:
    return _leaf(rng.uniform(-1.0, 1.0, (rows, dim)))


def _hinge_safety(distvalues: np.ndarray, ids, margin: float) -> float:
    """Distance of every anchor's hinge argument from zero (batch-soft)."""
    pos, neg = positive_negative_masks(ids)
    gaps = []
    for a in range(distvalues.shape[0]):
        dp = distvalues[a][pos[a]]
        dn = distvalues[a][neg[a]]
        wp = np.exp(dp - dp.max())
        wp /= wp.sum()
        wn = np.exp(-(dn - dn.min()))
        wn /= wn.sum()
        gaps.append(abs(margin + wp @ dp - wn @ dn))
    return min(gaps)


def _hard_safety(distvalues: np.ndarray, ids, margin: float) -> float:
    """Min over anchors of hinge distance and top-2 selection gaps."""
    pos, neg = positive_negative_masks(ids)
    worst = np.inf
    for a in range(distvalues.shape[0]):
        dp = np.sort(distvalues[a][pos[a]])
        dn = np.sort(distvalues[a][neg[a]])
        worst = min(worst, abs(margin + dp[-1] - dn[0]))
        if dp.size > 1:
            worst = min(worst, dp[-1] - dp[-2])
        if dn.size > 1:
            worst = min(worst, dn[1] - dn[0])
    return worst


def _screened_batch(seed: int, safety, num_ids=8, per_id=4, dim=3,
                    margin=0.3, threshold=1e-3) -> Tensor:
    """First seed-derived batch whose loss surface is kink-free."""
    ids = _pk_ids(num_ids, per_id)
    for attempt in range(64):
        rng = _rng(seed * 1000 + attempt)
        x = _embedding_leaf(rng, num_ids * per_id, dim)
        d = pairwise_distances(x).values
        if safety(d, ids, margin) > threshold:
            return x
    raise RuntimeError(f"no kink-free batch found for seed {seed}")


def _build_triplet_naive(seed: int) -> BuildResult:
    rng = _rng(seed)
    margin = 0.3
    d_ap = rng.uniform(0.0, 1.5, 6)
    d_an = rng.uniform(0.0, 1.5, 6)
    arg = margin + d_ap - d_an
    d_ap = np.where(np.abs(arg) < 0.05, d_ap + 0.1, d_ap)  # step off the hinge
    a = _leaf(d_ap)
    b = _leaf(d_an)
    c = rng.uniform(-1, 1, 6)
    return _weighted_sum(lambda p, n: triplet_naive(p, n, margin), c), [a, b], ["d_ap", "d_an"]


def _build_triplet_batch_all(seed: int) -> BuildResult:
    ids = _pk_ids(4, 2)

    def safety(d, ids_, m):
        pos, neg = positive_negative_masks(ids_)
        worst = np.inf
        for a in range(d.shape[0]):
            for p in np.nonzero(pos[a])[0]:
                for n in np.nonzero(neg[a])[0]:
                    worst = min(worst, abs(m + d[a, p] - d[a, n]))
        return worst

    x = _screened_batch(seed, safety, num_ids=4, per_id=2, dim=3)
    f = lambda t: triplet_batch_all(pairwise_distances(t), ids, 0.3)
    return f, [x], ["embeddings"]


def _build_triplet_batch_hard(seed: int) -> BuildResult:
    ids = _pk_ids(8, 4)
    x = _screened_batch(seed, _hard_safety)
    f = lambda t: triplet_batch_hard(pairwise_distances(t), ids, 0.3)
    return f, [x], ["embeddings"]


def _build_triplet_batch_soft(seed: int) -> BuildResult:
    ids = _pk_ids(8, 4)
    x = _screened_batch(seed, _hinge_safety)
    f = lambda t: triplet_batch_soft(pairwise_distances(t), ids, 0.3)
    return f, [x], ["embeddings"]


def _build_triplet_soft_margin(seed: int) -> BuildResult:
    ids = _pk_ids(8, 4)
    rng = _rng(seed)
    x = _embedding_leaf(rng, ids.size, 3)  # softplus is smooth: no screening
    f = lambda t: triplet_soft_margin(pairwise_distances(t), ids)
    return f, [x], ["embeddings"]


def _build_gem(seed: int) -> BuildResult:
    rng = _rng(seed)
    features = _leaf(rng.uniform(0.1, 2.0, (3, 6)))
    p = _leaf(rng.uniform(0.8, 3.5, 3))
    c = rng.uniform(-1, 1, (3,))

    def f(feat, p_leaf):
        layer = GemLayer(p=p_leaf)
        return ad.tensor_sum(ad.multiply(gem_pool(feat, layer), c))
    return f, [features, p], ["features", "p"]


def _build_cross_entropy(seed: int) -> BuildResult:
    rng = _rng(seed)
    logits = _leaf(rng.uniform(-2, 2, (4, 6)))
    targets = rng.integers(0, 6, 4)
    cfg = SmoothingConfig(epsilon=0.1, num_classes=6)
    return (lambda t: cross_entropy_smoothed(t, targets, cfg)), [logits], ["logits"]


def _build_pairwise(seed: int) -> BuildResult:
    rng = _rng(seed)
    x = _embedding_leaf(rng, 6, 3)
    c = rng.uniform(-1, 1, (6, 6))
    return _weighted_sum(lambda t: pairwise_distances(t), c), [x], ["embeddings"]


def default_suite() -> list[CheckCase]:
    return [
        CheckCase("op.add", _case_binary(ad.add)),
        CheckCase("op.subtract", _case_binary(ad.subtract)),
        CheckCase("op.multiply", _case_binary(ad.multiply)),
        CheckCase("op.divide", _case_binary(ad.divide, positive_b=True)),
        CheckCase("op.matmul", _build_matmul),
        CheckCase("op.relu", _build_relu),
        CheckCase("op.exp", _case_unary(ad.exp, -1.0, 1.0)),
        CheckCase("op.log", _case_unary(ad.log, 0.5, 2.0)),
        CheckCase("op.sqrt", _case_unary(ad.sqrt, 0.5, 2.0)),
        CheckCase("op.softplus", _case_unary(ad.softplus, -3.0, 3.0)),
        CheckCase("op.power", _build_power_scalar),
        CheckCase("op.power_learnable", _build_power_learnable),
        CheckCase("op.clamp_min", _build_clamp),
        CheckCase("op.sum", _build_sum_axis),
        CheckCase("op.mean", _build_mean_axis),
        CheckCase("op.reshape", _build_reshape),
        CheckCase("op.transpose", _build_transpose),
        CheckCase("op.concat", _build_concat),
        CheckCase("op.gather", _build_gather),
        CheckCase("op.softmax", _build_softmax),
        CheckCase("op.l2_normalize", _build_l2_normalize),
        CheckCase("loss.pairwise_distances", _build_pairwise),
        CheckCase("loss.triplet_naive", _build_triplet_naive),
        CheckCase("loss.triplet_batch_all", _build_triplet_batch_all),
        CheckCase("loss.triplet_batch_hard", _build_triplet_batch_hard),
        CheckCase("loss.triplet_batch_soft", _build_triplet_batch_soft),
        CheckCase("loss.triplet_soft_margin", _build_triplet_soft_margin),
        CheckCase("pool.gem", _build_gem),
        CheckCase("loss.cross_entropy_smoothed", _build_cross_entropy),
    ]


def run_case(case: CheckCase, seeds, h: float = 1e-5,
             tol: float = 1e-4) -> dict:
    worst = 0.0
    for seed in seeds:
        f, leaves, names = case.build(seed)
        report: GradCheckReport = finite_diff_check(f, leaves, h=h, tol=tol,
                                                    names=names)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            return {"name": case.name, "max_rel_error": report.max_rel_error,
                    "passed": False, "seed": seed, "note": report.note}
    return {"name": case.name, "max_rel_error": worst, "passed": True}


def run_suite(cases=None, seeds=range(10), h: float = 1e-5,
              tol: float = 1e-4) -> list[dict]:
    cases = cases if cases is not None else default_suite()
    return [run_case(case, seeds, h=h, tol=tol) for case in cases]
