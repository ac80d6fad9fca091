"""Deterministic, platform-independent pseudo-random numbers.

A splitmix-style 64-bit generator: one multiplicative increment plus two
xor-shift mixes per draw.  Identical sequences on every platform and
Python build, which keeps dataset generation and search probes exactly
reproducible (numpy's default generators do not promise cross-version
stream stability).
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self, lo: float, hi: float) -> float:
        """Uniform draw in [lo, hi) with 53-bit resolution."""
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u
