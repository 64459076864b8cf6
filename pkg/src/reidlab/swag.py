"""Weight-snapshot averaging and a diagonal-Gaussian posterior over weights.

Snapshots taken at cycle ends stream into running first and second
moments.  The mean is the averaged-weights solution; mean plus diagonal
variance defines a Gaussian posterior that can be sampled for Bayesian
model averaging of predictions.

Posterior updates are serialized; sampling and prediction averaging may
fan out across threads using per-sample seeds derived from the root seed.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RLSWAGP1"
FORMAT_VERSION = 1
DEFAULT_VARIANCE_FLOOR = 1e-30


class LayoutMismatchError(ValueError):
    """Snapshot layout differs from the posterior's layout."""


@dataclass(frozen=True)
class WeightLayout:
    """Maps named parameter segments to slices of one flat vector."""
    segments: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.segments)

    def offsets(self) -> dict[str, tuple[int, int]]:
        table, start = {}, 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            table[name] = (start, start + n)
            start += n
        return table

    def to_json(self) -> str:
        return json.dumps([[name, list(shape)] for name, shape in self.segments])

    @classmethod
    def from_json(cls, text: str) -> "WeightLayout":
        return cls(tuple((name, tuple(shape)) for name, shape in json.loads(text)))


@dataclass
class WeightVector:
    """Flat float64 parameter vector plus its segment layout."""
    values: np.ndarray
    layout: WeightLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.layout.size:
            raise LayoutMismatchError(
                f"vector has {self.values.size} values, layout expects {self.layout.size}")

    def segment(self, name: str) -> np.ndarray:
        start, stop = self.layout.offsets()[name]
        shape = dict(self.layout.segments)[name]
        return self.values[start:stop].reshape(shape)


@dataclass
class SwagPosterior:
    """Running snapshot moments: count, mean, and raw second moment."""
    layout: WeightLayout
    count: int = 0
    mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    second_moment: np.ndarray = field(default=None)  # type: ignore[assignment]
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.layout.size)
        if self.second_moment is None:
            self.second_moment = np.zeros(self.layout.size)

    def diag_variance(self) -> np.ndarray:
        return np.maximum(self.second_moment - self.mean ** 2, self.variance_floor)

    def floor_hits(self) -> int:
        """How many coordinates the variance floor clamped (reported so
        callers can see when cancellation or n=1 degeneracy kicked in)."""
        return int((self.second_moment - self.mean ** 2 < self.variance_floor).sum())


def collect_snapshot(posterior: SwagPosterior, weights: WeightVector) -> SwagPosterior:
    """Fold one snapshot into the running moments with equal weight:
    mean_n = mean_{n-1} (n-1)/n + w/n, applied in the algebraically equal
    incremental form mean += (w - mean)/n, which is drift-free when the
    stream is constant (identical snapshots give exactly zero spread)."""
    if weights.layout != posterior.layout:
        raise LayoutMismatchError("snapshot layout differs from posterior layout")
    n = posterior.count + 1
    w = weights.values
    posterior.mean = posterior.mean + (w - posterior.mean) / n
    posterior.second_moment = posterior.second_moment + (w * w - posterior.second_moment) / n
    posterior.count = n
    return posterior


def swa_weights(posterior: SwagPosterior) -> WeightVector:
    """The uniform average of all collected snapshots."""
    if posterior.count < 1:
        raise ValueError("no snapshots collected")
    return WeightVector(posterior.mean.copy(), posterior.layout)


def _sample_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def swag_sample(posterior: SwagPosterior, scale: float, seed) -> WeightVector:
    """mean + scale * sigma * z with z standard normal from the seeded
    generator.  scale=0 short-circuits to the exact mean."""
    if posterior.count < 1:
        raise ValueError("no snapshots collected")
    if scale == 0.0:
        return WeightVector(posterior.mean.copy(), posterior.layout)
    rng = _sample_rng(seed)
    z = rng.standard_normal(posterior.mean.size)
    sigma = np.sqrt(posterior.diag_variance())
    return WeightVector(posterior.mean + scale * sigma * z, posterior.layout)


def derive_sample_seed(root_seed: int, index: int) -> np.random.SeedSequence:
    """Deterministic per-sample seed stream from one root seed."""
    return np.random.SeedSequence(entropy=root_seed, spawn_key=(index,))


def bma_predict(posterior: SwagPosterior, num_samples: int, evaluate_model,
                inputs, scale: float = 0.5, seed: int = 0,
                renormalize: bool = False) -> np.ndarray:
    """Average model outputs over posterior samples.

    ``evaluate_model(weights, inputs)`` returns an array; embeddings are
    averaged raw and optionally re-scaled to unit row norm afterwards.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    total = None
    for s in range(num_samples):
        w = swag_sample(posterior, scale, derive_sample_seed(seed, s))
        out = np.asarray(evaluate_model(w, inputs), dtype=np.float64)
        total = out if total is None else total + out
    avg = total / num_samples
    if renormalize:
        norms = np.linalg.norm(avg, axis=-1, keepdims=True)
        avg = avg / np.where(norms == 0.0, 1.0, norms)
    return avg


# ---------------------------------------------------------------------------
# serialization: magic, version, layout JSON, count, floor, mean, second moment

def save_posterior(posterior: SwagPosterior, path) -> None:
    layout_blob = posterior.layout.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(layout_blob)))
        fh.write(layout_blob)
        fh.write(struct.pack("<Q", posterior.count))
        fh.write(struct.pack("<d", posterior.variance_floor))
        fh.write(posterior.mean.astype("<f8").tobytes())
        fh.write(posterior.second_moment.astype("<f8").tobytes())


def load_posterior(path) -> SwagPosterior:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a posterior file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unknown posterior format version {version}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        layout = WeightLayout.from_json(fh.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<Q", fh.read(8))
        (floor,) = struct.unpack("<d", fh.read(8))
        size = layout.size
        mean = np.frombuffer(fh.read(8 * size), dtype="<f8").copy()
        second = np.frombuffer(fh.read(8 * size), dtype="<f8").copy()
        if mean.size != size or second.size != size:
            raise ValueError("truncated posterior file")
    return SwagPosterior(layout=layout, count=count, mean=mean,
                         second_moment=second, variance_floor=floor)
