"""SplitMix64 pseudo-random stream.

Chosen for bit-reproducibility: the update is pure 64-bit integer
arithmetic, so corpora, batch orders, and parameter inits are identical
on every platform. Floats map a draw's top 53 bits to [0, 1).

The state advances by a fixed increment per draw, so a block of draws is
a pure function of the draw index; array variants exploit that and stay
bit-identical to repeated scalar calls.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def next_index(self, upper: int) -> int:
        """Uniform integer in [0, upper) by inverse CDF."""
        return min(int(self.next_float() * upper), upper - 1)

    def next_gauss(self) -> float:
        """Standard normal via Box-Muller (two uniform draws per call)."""
        u1 = self.next_float()
        u2 = self.next_float()
        # 1 - u1 keeps the log argument strictly positive
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def u64_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self.state) + np.uint64(_GAMMA) * steps  # wraps mod 2^64
        self.state = (self.state + n * _GAMMA) & _MASK64
        return _mix(states)

    def float_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def index_array(self, n: int, upper: int) -> np.ndarray:
        return np.minimum((self.float_array(n) * upper).astype(np.int64), upper - 1)

    def gauss_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.float_array(2 * n)
        z = np.sqrt(-2.0 * np.log(1.0 - u[0::2])) * np.cos(2.0 * np.pi * u[1::2])
        return z.reshape(shape)
