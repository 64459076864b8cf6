"""Synthetic identity data, identity-balanced batch sampling, random
erasing augmentation, and embedding file I/O.

Generators are seed-parameterized pure functions; concurrent use requires
distinct generator instances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EMBEDDINGS_FORMAT = "reidlab-embeddings"
EMBEDDINGS_VERSION = 1


@dataclass
class IdentityDataset:
    """Feature rows with identity and camera labels."""
    samples: np.ndarray  # (N, D)
    ids: np.ndarray      # (N,)
    cams: np.ndarray     # (N,)
    split: str = "train"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=int)
        self.cams = np.asarray(self.cams, dtype=int)
        n = self.samples.shape[0]
        if self.ids.shape[0] != n or self.cams.shape[0] != n:
            raise ValueError("samples, ids and cams must have equal length")

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def num_identities(self) -> int:
        return np.unique(self.ids).size

    def subset(self, index, split: str | None = None) -> "IdentityDataset":
        return IdentityDataset(self.samples[index], self.ids[index],
                               self.cams[index], split or self.split)


def gen_synthetic(num_identities: int, per_identity: int, dim: int,
                  intra_sigma: float, spread: float, seed,
                  num_cameras: int = 6, cam_spread: float = 0.0,
                  split: str = "train") -> IdentityDataset:
    """Gaussian identity clusters: per-identity centers drawn uniformly in
    [-spread, spread]^dim, samples = center + sigma * noise.

    Camera ids cycle round-robin per identity.  ``cam_spread`` > 0 adds a
    fixed per-camera offset vector, a nuisance factor an embedder has to
    learn away before cross-camera retrieval works.
    """
    if intra_sigma <= 0 or spread <= 0:
        raise ValueError("intra_sigma and spread must be positive")
    if num_identities < 1 or per_identity < 1 or num_cameras < 1:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-spread, spread, size=(num_identities, dim))
    if cam_spread > 0:
        cam_offsets = rng.uniform(-cam_spread, cam_spread, size=(num_cameras, dim))
    else:
        cam_offsets = np.zeros((num_cameras, dim))

    n = num_identities * per_identity
    samples = np.empty((n, dim))
    ids = np.empty(n, dtype=int)
    cams = np.empty(n, dtype=int)
    row = 0
    for i in range(num_identities):
        for j in range(per_identity):
            cam = j % num_cameras
            samples[row] = (centers[i] + intra_sigma * rng.standard_normal(dim)
                            + cam_offsets[cam])
            ids[row] = i
            cams[row] = cam
            row += 1
    return IdentityDataset(samples, ids, cams, split)


# ---------------------------------------------------------------------------
# identity-balanced batch sampling

@dataclass
class PkSpec:
    """P distinct identities with K rows each per batch."""
    num_ids: int = 8
    per_id: int = 4

    def __post_init__(self):
        if self.num_ids < 1 or self.per_id < 1:
            raise ValueError("num_ids and per_id must be positive")

    @property
    def batch_size(self) -> int:
        return self.num_ids * self.per_id


def _rows_for_id(dataset: IdentityDataset, identity: int) -> np.ndarray:
    return np.nonzero(dataset.ids == identity)[0]


def _sample_rows(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k rows for one identity; every distinct row appears before any
    repeats when the identity has fewer than k samples."""
    if rows.size >= k:
        return rng.choice(rows, size=k, replace=False)
    extra = rng.choice(rows, size=k - rows.size, replace=True)
    return np.concatenate([rows, extra])


def pk_sample(dataset: IdentityDataset, spec: PkSpec, seed) -> np.ndarray:
    """One batch of row indices: exactly P distinct identities, K rows each."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    unique_ids = np.unique(dataset.ids)
    if unique_ids.size < spec.num_ids:
        raise ValueError(
            f"dataset has {unique_ids.size} identities, batch needs {spec.num_ids}")
    chosen = rng.choice(unique_ids, size=spec.num_ids, replace=False)
    batch = [_sample_rows(_rows_for_id(dataset, i), spec.per_id, rng) for i in chosen]
    return np.concatenate(batch)


class PkEpochSampler:
    """Yields ceil(N / (P*K)) batches per epoch, drawing identities without
    replacement until the pool is exhausted, then reshuffling."""

    def __init__(self, dataset: IdentityDataset, spec: PkSpec, seed):
        self.dataset = dataset
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self._ids = np.unique(dataset.ids)
        if self._ids.size < spec.num_ids:
            raise ValueError(
                f"dataset has {self._ids.size} identities, batch needs {spec.num_ids}")
        self._queue: list[int] = []

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.dataset.ids.size / self.spec.batch_size)

    def _next_ids(self) -> np.ndarray:
        while len(self._queue) < self.spec.num_ids:
            refill = self._ids.copy()
            self.rng.shuffle(refill)
            # avoid duplicating an identity already waiting in the queue
            pending = set(self._queue)
            self._queue.extend(int(i) for i in refill if int(i) not in pending)
        picked = self._queue[:self.spec.num_ids]
        self._queue = self._queue[self.spec.num_ids:]
        return np.asarray(picked)

    def epoch(self):
        for _ in range(self.batches_per_epoch):
            ids = self._next_ids()
            batch = [_sample_rows(_rows_for_id(self.dataset, i), self.spec.per_id,
                                  self.rng) for i in ids]
            yield np.concatenate(batch)


# ---------------------------------------------------------------------------
# random erasing

@dataclass
class ReaParams:
    """Erase-probability and the open ranges for area ratio and aspect."""
    probability: float = 0.5
    area_lo: float = 0.02
    area_hi: float = 0.4
    aspect_lo: float = 0.3
    aspect_hi: float = 3.3
    fill: str = "random"          # or "mean"
    mean_value: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")
        if not (0.0 < self.area_lo < self.area_hi):
            raise ValueError("need 0 < area_lo < area_hi")
        if not (0.0 < self.aspect_lo < self.aspect_hi):
            raise ValueError("need 0 < aspect_lo < aspect_hi")
        if self.fill not in ("random", "mean"):
            raise ValueError(f"unknown fill mode {self.fill!r}")


@dataclass
class ReaStats:
    applied: int = 0
    skipped: int = 0
    failed: int = 0


def random_erase(image: np.ndarray, params: ReaParams, seed,
                 stats: ReaStats | None = None) -> np.ndarray:
    """Overwrite one random rectangle with fill, or return the image as is.

    Rejection-samples (area ratio, aspect) until the rounded rectangle
    both fits and still satisfies the open range constraints; gives up
    unchanged after 100 attempts.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h_img, w_img = image.shape[0], image.shape[1]
    if h_img < 8 or w_img < 8:
        raise ValueError(f"image {h_img}x{w_img} too small to erase (need >= 8x8)")

    if rng.random() >= params.probability:
        if stats is not None:
            stats.skipped += 1
        return image

    area = h_img * w_img
    for _ in range(100):
        target_ratio = rng.uniform(params.area_lo, params.area_hi)
        aspect = rng.uniform(params.aspect_lo, params.aspect_hi)
        target_area = target_ratio * area
        h = int(round(math.sqrt(target_area * aspect)))
        w = int(round(math.sqrt(target_area / aspect)))
        if h < 1 or w < 1 or h > h_img or w > w_img:
            continue
        # rounding can push the realized box outside the open ranges
        if not (params.area_lo < (h * w) / area < params.area_hi):
            continue
        if not (params.aspect_lo < h / w < params.aspect_hi):
            continue
        top = int(rng.integers(0, h_img - h + 1))
        left = int(rng.integers(0, w_img - w + 1))
        out = image.copy()
        if params.fill == "random":
            out[top:top + h, left:left + w] = rng.random(out[top:top + h,
                                                             left:left + w].shape)
        else:
            out[top:top + h, left:left + w] = params.mean_value
        if stats is not None:
            stats.applied += 1
        return out

    if stats is not None:
        stats.failed += 1
    return image


def erase_span_1d(row: np.ndarray, params: ReaParams, rng: np.random.Generator) -> np.ndarray:
    """1-D analog of random erasing for vector inputs: zero one contiguous
    span whose length fraction is drawn from the area range."""
    if rng.random() >= params.probability:
        return row
    n = row.size
    frac = rng.uniform(params.area_lo, params.area_hi)
    length = max(1, int(round(frac * n)))
    if length >= n:
        return row
    start = int(rng.integers(0, n - length + 1))
    out = row.copy()
    out[start:start + length] = 0.0
    return out


# ---------------------------------------------------------------------------
# embedding file I/O (versioned CSV)

def save_embeddings(dataset: IdentityDataset, path) -> None:
    """UTF-8 CSV: a version comment carrying row/dim counts, a header
    ``id,cam,f0..f{D-1}``, then one row per sample with 17-significant-digit
    doubles for a lossless round trip."""
    n, d = dataset.samples.shape
    header = ["id", "cam"] + [f"f{i}" for i in range(d)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {EMBEDDINGS_FORMAT} v{EMBEDDINGS_VERSION} rows={n} dim={d}\n")
        fh.write(",".join(header) + "\n")
        for row in range(n):
            feats = ",".join(f"{v:.17g}" for v in dataset.samples[row])
            fh.write(f"{dataset.ids[row]},{dataset.cams[row]},{feats}\n")


def load_embeddings(path, split: str = "train") -> IdentityDataset:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        meta = _parse_version_line(first, path)
        header = fh.readline().rstrip("\n")
        dim = _check_header(header, meta, path)
        samples, ids, cams = [], [], []
        for lineno, line in enumerate(fh, start=3):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 2:
                raise ValueError(
                    f"{path}: line {lineno}: expected {dim + 2} fields, found {len(parts)}")
            ids.append(int(parts[0]))
            cams.append(int(parts[1]))
            samples.append([float(v) for v in parts[2:]])
    if len(samples) != meta["rows"]:
        raise ValueError(
            f"{path}: expected {meta['rows']} rows, found {len(samples)}")
    return IdentityDataset(np.asarray(samples, dtype=np.float64).reshape(len(samples), dim),
                           np.asarray(ids), np.asarray(cams), split)


def _parse_version_line(line: str, path) -> dict:
    parts = line.split()
    if (len(parts) < 3 or parts[0] != "#" or parts[1] != EMBEDDINGS_FORMAT
            or not parts[2].startswith("v") or not parts[2][1:].isdigit()):
        raise ValueError(f"{path}: malformed header line {line!r}")
    version = int(parts[2][1:])
    if version != EMBEDDINGS_VERSION:
        raise ValueError(f"{path}: unknown embeddings format version {version}")
    meta = {}
    for kv in parts[3:]:
        key, _, value = kv.partition("=")
        meta[key] = int(value)
    if "rows" not in meta or "dim" not in meta:
        raise ValueError(f"{path}: header missing rows/dim counts")
    return meta


def _check_header(header: str, meta: dict, path) -> int:
    cols = header.split(",")
    dim = meta["dim"]
    expected = ["id", "cam"] + [f"f{i}" for i in range(dim)]
    if cols != expected:
        if "id" not in cols:
            raise ValueError(f"{path}: schema error, id column missing")
        if "cam" not in cols:
            raise ValueError(f"{path}: schema error, cam column missing")
        raise ValueError(
            f"{path}: schema error, header columns do not match id,cam,f0..f{dim - 1}")
    return dim
