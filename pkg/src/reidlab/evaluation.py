"""Retrieval evaluation: query/gallery distances, CMC rank-k, and mAP
under the single-query camera-exclusion protocol.

Gallery entries sharing both identity and camera with the query are
removed before ranking; remaining entries rank ascending by distance with
ties broken by gallery index, which keeps results reproducible across
runs and platforms.  Per-query computation is pure, so parallel layouts
must reduce in a fixed order to stay deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METRICS = ("euclidean", "cosine-distance")


@dataclass
class EvalResult:
    cmc: np.ndarray            # (k_max,), rank-k accuracy over valid queries
    mean_ap: float
    per_query_ap: np.ndarray   # NaN for queries with no valid match
    valid_queries: int

    def to_dict(self) -> dict:
        return {"map": self.mean_ap,
                "cmc": [float(v) for v in self.cmc],
                "valid_queries": self.valid_queries}


def distance_matrix(queries: np.ndarray, gallery: np.ndarray,
                    metric: str = "euclidean") -> np.ndarray:
    """Q x G distances; metric is euclidean or cosine-distance."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise ValueError(
            f"dim mismatch: queries {queries.shape} vs gallery {gallery.shape}")
    if metric == "euclidean":
        sq = ((queries ** 2).sum(axis=1)[:, None]
              + (gallery ** 2).sum(axis=1)[None, :]
              - 2.0 * queries @ gallery.T)
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine-distance":
        qn = np.linalg.norm(queries, axis=1, keepdims=True)
        gn = np.linalg.norm(gallery, axis=1, keepdims=True)
        qhat = queries / np.where(qn == 0.0, 1.0, qn)
        ghat = gallery / np.where(gn == 0.0, 1.0, gn)
        return 1.0 - qhat @ ghat.T
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def evaluate_reid(distmat: np.ndarray, q_ids, g_ids, q_cams, g_cams,
                  k_max: int = 20) -> EvalResult:
    """CMC and mAP with same-id-same-camera gallery exclusion.

    AP per query averages m / rank_m over relevant positions m; queries
    left with no valid match are excluded from both metrics and counted.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    num_q, num_g = distmat.shape
    if (q_ids.size, g_ids.size, q_cams.size, g_cams.size) != (num_q, num_g, num_q, num_g):
        raise ValueError("label arrays do not match distance matrix shape")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")

    cmc_hits = np.zeros(k_max)
    per_query_ap = np.full(num_q, np.nan)
    valid = 0
    for q in range(num_q):
        keep = ~((g_ids == q_ids[q]) & (g_cams == q_cams[q]))
        if not keep.any():
            continue
        d = distmat[q, keep]
        order = np.argsort(d, kind="stable")  # stable = ties by gallery index
        matches = (g_ids[keep][order] == q_ids[q])
        if not matches.any():
            continue
        valid += 1
        first = int(np.argmax(matches))
        if first < k_max:
            cmc_hits[first:] += 1.0
        ranks = np.nonzero(matches)[0] + 1
        precision_at_hits = np.arange(1, ranks.size + 1) / ranks
        per_query_ap[q] = float(precision_at_hits.mean())

    if valid == 0:
        raise ValueError("no query has a valid gallery match")
    cmc = cmc_hits / valid
    mean_ap = float(np.nanmean(per_query_ap))
    return EvalResult(cmc=cmc, mean_ap=mean_ap, per_query_ap=per_query_ap,
                      valid_queries=valid)
