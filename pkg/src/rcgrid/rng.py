"""Counter-based splittable randomness.

Streams are Philox generators keyed by (seed, stream_id), so parallel
episodes can derive independent per-episode streams without shared state and
the same pair always reproduces the same scalar sequence on any platform.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        self.gen = np.random.Generator(
            np.random.Philox(key=self.seed | (self.stream_id << 64)))

    def stream(self, stream_id):
        """Child stream with the same seed and a new stream_id."""
        return Rng(self.seed, stream_id)

    def derive(self, offset):
        """Child stream offset from this stream's id (for nested splits)."""
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + int(offset) + 1) & MASK64
        return Rng(self.seed, mixed)

    # -- draws ----------------------------------------------------------
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, scale=1.0, size=None):
        return self.gen.normal(0.0, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n, size=None, replace=True):
        return self.gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self.gen.permutation(n)


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-bound, bound, shape)
