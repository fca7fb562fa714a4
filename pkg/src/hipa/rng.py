"""Counter-based SplitMix64 generator.

Every draw is a pure function of ``(key, counter)``::

    z = key + (counter + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniform doubles take the top 53 bits, ``(z >> 11) * 2**-53``. Normal draws use
Box-Muller on consecutive uniform pairs. Sub-streams are derived by mixing a
label into the key, so independent consumers never share counters.
"""
from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar finalizer, used for key derivation."""
    return int(_mix(np.array([value & _MASK], dtype=np.uint64))[0])


def derive_key(key: int, *labels: int) -> int:
    for label in labels:
        key = mix64((key ^ mix64(label + 0x632BE59BD9B4E019)) & _MASK)
    return key


class SplitMix64:
    """Stateful view over the counter-based stream: ``counter`` advances by the
    number of 64-bit words consumed."""

    def __init__(self, seed: int, counter: int = 0):
        self.key = int(seed) & _MASK
        self.counter = int(counter)

    def spawn(self, *labels: int) -> "SplitMix64":
        return SplitMix64(derive_key(self.key, *labels))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * GOLDEN
            return _mix(z)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        w = self.bits(2 * m) >> np.uint64(11)
        # shift by half an ulp so the log argument is never zero
        u1 = (w[0::2].astype(np.float64) + 0.5) * 2.0**-53
        u2 = w[1::2].astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n].reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        u = self.uniform(shape)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def choice(self, probs, shape=()) -> np.ndarray:
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        cdf /= cdf[-1]
        u = self.uniform(shape)
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
