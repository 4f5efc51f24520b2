"""Deterministic random number generation.

All randomness in the package (parameter init, dropout, SpecAugment,
corpus synthesis, batch shuffling) flows through RngState, a thin wrapper
around numpy's Philox counter-based bit generator.  Philox is keyed by
(seed, stream), so independent streams can be split off without any
cross-talk between their draw sequences: the same seed and the same call
sequence always reproduce the same draws, on every platform.
"""

from __future__ import annotations

import numpy as np


class RngState:
    """Seeded Philox-backed generator with cheap stream splitting."""

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError(f"seed and stream must be nonnegative, got {seed}, {stream}")
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def split(self, stream: int) -> "RngState":
        """Return an independent generator keyed by (seed, stream).

        Splitting is stateless: it depends only on the key, never on how
        many draws the parent has made, which keeps per-utterance streams
        deterministic under parallel loading.
        """
        return RngState(self.seed, stream)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Draw integers uniformly from [low, high) like numpy's Generator."""
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream})"
