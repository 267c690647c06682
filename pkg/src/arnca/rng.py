"""SplitMix64 random streams.

Every random draw made by the simulators goes through :class:`RngStream`, so a
seed fixes the generated bytes on any platform with IEEE doubles.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (advance by gamma, then mix)."""
    z = np.array([(int(x) + int(GAMMA)) & _MASK64], dtype=np.uint64)
    return int(_mix(z)[0])


class RngStream:
    """Counter-style SplitMix64 generator with vectorised draws.

    Drawing ``k`` values at once yields exactly the same numbers as ``k``
    single draws, so array shapes never change the stream.
    """

    algorithm = "splitmix64"

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & _MASK64

    def next_u64(self, count: int) -> np.ndarray:
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GAMMA
            out = _mix(z)
        self.state = (self.state + count * int(GAMMA)) & _MASK64
        return out

    def random(self, shape: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        size = int(np.prod(shape)) if shape != () else 1
        u = (self.next_u64(size) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        if shape == ():
            return float(u[0])
        return u.reshape(shape)

    def integers(self, high: int, shape: int | tuple[int, ...] = ()) -> np.ndarray | int:
        """Integers uniform on ``0..high-1`` (floor of a scaled uniform)."""
        u = self.random(shape)
        out = np.minimum(np.floor(np.asarray(u) * high).astype(np.int64), high - 1)
        return int(out) if shape == () else out

    def choice_distinct(self, population: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(population)`` (partial Fisher-Yates)."""
        if k > population:
            raise ValueError(f"cannot draw {k} distinct items from {population}")
        pool = np.arange(population, dtype=np.int64)
        u = self.random((k,)) if k else np.zeros(0)
        for i in range(k):
            j = i + min(int(u[i] * (population - i)), population - i - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
