"""Initial-state partitioning via k-means over sampled resets.

Clustering restricts itself to the state dimensions that actually vary
across resets (sample variance above 1e-12); constant coordinates would
only dilute the distance metric.  Context weights are the empirical
assignment frequencies, floored at 1e-4 and renormalized so no context
ever has zero probability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng

WEIGHT_FLOOR = 1e-4
VARIANCE_EPS = 1e-12
MAX_LLOYD_ITERS = 300
N_RESTARTS = 10


@dataclass(frozen=True)
class Partition:
    """k cluster centers in (masked) initial-state space plus weights."""

    centers: np.ndarray  # (k, d) where d = len(feature_mask) or state_dim
    weights: np.ndarray  # (k,), positive, sums to 1
    feature_mask: Optional[tuple[int, ...]] = None  # indices into the full state

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if c.ndim != 2 or w.shape != (c.shape[0],):
            raise ShapeError("centers must be (k, d) with one weight per center")
        if abs(w.sum() - 1.0) > 1e-9 or (w <= 0).any():
            raise ConfigError("weights must be positive and sum to 1")
        if len(np.unique(c, axis=0)) != c.shape[0]:
            raise ConfigError("centers must be pairwise distinct")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def features(self, state: np.ndarray) -> np.ndarray:
        if self.feature_mask is None:
            return state
        return state[..., list(self.feature_mask)]

    def assign(self, state) -> int:
        """Index of the nearest center (squared Euclidean, ties to lowest)."""
        s = self.features(np.asarray(state, dtype=np.float64))
        if s.shape != (self.centers.shape[1],):
            raise ShapeError(
                f"state features {s.shape} != ({self.centers.shape[1]},)"
            )
        return int(np.argmin(((self.centers - s) ** 2).sum(axis=1)))

    def assign_batch(self, states) -> np.ndarray:
        feats = self.features(np.asarray(states, dtype=np.float64))
        d2 = ((feats[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


def _wcss(samples: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    return float(((samples - centers[labels]) ** 2).sum())


def _lloyd(
    samples: np.ndarray, k: int, rng: Rng
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """One Lloyd run from a random k-sample init.

    Returns (centers, labels, per-iteration WCSS trace).  An empty cluster
    is repaired by re-seeding its center at the sample farthest from its
    current assignment; the trace only covers normal iterations, where
    WCSS is non-increasing.
    """
    n = samples.shape[0]
    centers = samples[rng.choice_indices(n, k)].copy()
    labels = np.full(n, -1)
    trace: list[float] = []
    for _ in range(MAX_LLOYD_ITERS):
        d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(n), new_labels].sum()))
        if (new_labels == labels).all():
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = samples[members].mean(axis=0)
            else:
                worst = int(d2[np.arange(n), labels].argmax())
                centers[c] = samples[worst]
                labels[worst] = c
    return centers, labels, trace


def varying_dimensions(samples: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(samples.var(axis=0) > VARIANCE_EPS))


def kmeans(samples, k: int, rng: Rng, feature_mask: Optional[tuple[int, ...]] = "auto") -> Partition:
    """Best of 10 Lloyd restarts on the varying state dimensions.

    ``feature_mask`` defaults to auto-detection; pass None to cluster on
    all dimensions or an explicit index tuple to override.
    """
    full = np.asarray(samples, dtype=np.float64)
    if full.ndim != 2:
        raise ShapeError("samples must be a (n, state_dim) array")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if full.shape[0] < 10 * k:
        raise ConfigError(f"need at least {10 * k} samples for k={k}")
    if feature_mask == "auto":
        mask = varying_dimensions(full)
        if not mask:  # fully deterministic resets: keep every dimension
            mask = None
    else:
        mask = tuple(feature_mask) if feature_mask is not None else None
    data = full if mask is None else full[:, list(mask)]
    if len(np.unique(data, axis=0)) < k:
        raise ConfigError(f"fewer than k={k} distinct samples")

    best: tuple[float, np.ndarray, np.ndarray] | None = None
    for r in range(N_RESTARTS):
        centers, labels, trace = _lloyd(data, k, rng.child(r))
        score = trace[-1]
        if best is None or score < best[0]:
            best = (score, centers, labels)
    _, centers, labels = best
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    weights = np.maximum(counts / counts.sum(), WEIGHT_FLOOR)
    weights /= weights.sum()
    order = np.lexsort(centers.T[::-1])  # deterministic center ordering
    return Partition(centers[order], weights[order], mask)


def estimate_weights(part: Partition, fresh_samples) -> Partition:
    """Re-estimate context weights from assignment frequencies."""
    samples = np.asarray(fresh_samples, dtype=np.float64)
    if samples.shape[0] < 100:
        raise ConfigError("need at least 100 samples to estimate weights")
    labels = part.assign_batch(samples)
    counts = np.bincount(labels, minlength=part.k).astype(np.float64)
    weights = np.maximum(counts / counts.sum(), WEIGHT_FLOOR)
    weights /= weights.sum()
    return Partition(part.centers, weights, part.feature_mask)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_partition(path, part: Partition) -> None:
    """JSON with floats at 17 significant digits (bit-exact reload)."""
    centers = ",\n    ".join(
        "[" + ", ".join(_fmt(v) for v in row) + "]" for row in part.centers
    )
    weights = ", ".join(_fmt(w) for w in part.weights)
    mask = "null" if part.feature_mask is None else json.dumps(list(part.feature_mask))
    text = (
        "{\n"
        f'  "k": {part.k},\n'
        f'  "feature_mask": {mask},\n'
        f'  "centers": [\n    {centers}\n  ],\n'
        f'  "weights": [{weights}]\n'
        "}\n"
    )
    with open(path, "w") as fh:
        fh.write(text)


def load_partition(path) -> Partition:
    with open(path) as fh:
        doc = json.load(fh)
    mask = None if doc["feature_mask"] is None else tuple(doc["feature_mask"])
    part = Partition(np.asarray(doc["centers"]), np.asarray(doc["weights"]), mask)
    if part.k != doc["k"]:
        raise ConfigError(f"{path}: k={doc['k']} does not match centers")
    return part
