"""SplitMix64 stream used for every seeded tensor in the project.

numpy's generators are not guaranteed to produce identical streams across
versions, so fixtures are drawn from this fixed integer recurrence instead.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64.

    Output ``k`` (0-based) is ``mix(seed + (k + 1) * GAMMA)``, which is the
    classic sequential formulation unrolled so a block can be drawn at once.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_uint64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + k * _GAMMA
            return _mix(state)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` float64 draws in ``[low, high)`` from the top 53 bits."""
        u = (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u
