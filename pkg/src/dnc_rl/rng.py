"""Deterministic random number generation.

All randomness in the library flows from a single integer seed through
``Rng``, a thin wrapper around numpy's PCG64 counter-based generator
(O'Neill's PCG, 128-bit LCG state with documented multiplier; numpy
guarantees a platform-independent bit stream for a given seed).

Independent substreams are derived with ``child``, which appends a tuple
of integers to the underlying ``SeedSequence`` spawn key.  Derivation is
pure: ``Rng(seed).child(k)`` is the same stream regardless of how much
the parent has been consumed, so parallel workers can own disjoint
streams (worker i uses ``base.child(worker_stream, i)``).
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Seeded generator with uniform, normal, and categorical draws."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    def child(self, *key: int) -> "Rng":
        """Derive an independent substream identified by integer key parts."""
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def categorical(self, probs) -> int:
        """Draw an index with the given probabilities (must sum to 1)."""
        p = np.asarray(probs, dtype=np.float64)
        u = self._gen.uniform()
        return int(min(np.searchsorted(np.cumsum(p), u), len(p) - 1))

    def choice_indices(self, n: int, k: int) -> np.ndarray:
        """k indices sampled from range(n) without replacement."""
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"
