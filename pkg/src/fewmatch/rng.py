"""Portable seeded random stream.

All sampling paths (episodes, synthetic data, initialisation, shuffles) draw
from :class:`Xoshiro256`, i.e. xoshiro256** (Blackman & Vigna, 2018) seeded
through splitmix64.  The derived draws are defined here bit-for-bit so that
episode lists can be reproduced by other implementations:

* ``next_u64``   -- raw xoshiro256** output.
* ``randbelow``  -- rejection sampling: draw ``x`` until
  ``x < 2**64 - (2**64 mod bound)``, return ``x mod bound``.
* ``random``     -- ``(next_u64() >> 11) * 2**-53`` in ``[0, 1)``.
* ``normal``     -- Box-Muller cosine branch with ``u1 = 1 - random()``,
  ``u2 = random()``; two uniforms per normal.
* ``sample``     -- partial Fisher-Yates over ``range(n)``.
"""

import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state):
    """Return ``(new_state, output)`` of one splitmix64 step."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** generator with a few derived distributions."""

    def __init__(self, seed: int):
        seed = int(seed) & _MASK
        s = []
        for _ in range(4):
            seed, out = splitmix64(seed)
            s.append(out)
        self._s = s

    def getstate(self):
        return tuple(self._s)

    def setstate(self, state):
        self._s = list(state)

    def copy(self):
        other = Xoshiro256.__new__(Xoshiro256)
        other._s = list(self._s)
        return other

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def randbelow(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        x = self.next_u64()
        while x >= limit:
            x = self.next_u64()
        return x % bound

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def normal(self) -> float:
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, shape, low=0.0, high=1.0):
        size = int(np.prod(shape, dtype=np.int64))
        out = np.array([self.random() for _ in range(size)], dtype=np.float64)
        return (low + (high - low) * out).reshape(shape)

    def normal_array(self, shape):
        size = int(np.prod(shape, dtype=np.int64))
        return np.array([self.normal() for _ in range(size)], dtype=np.float64).reshape(shape)

    def sample(self, n: int, k: int) -> list:
        """``k`` distinct indices from ``range(n)`` in draw order."""
        if k > n:
            raise ValueError(f"cannot sample {k} items from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def permutation(self, n: int) -> list:
        return self.sample(n, n)
