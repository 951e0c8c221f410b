"""Seeded, counter-based random numbers.

The integer stream is SplitMix64 evaluated at ``seed_state + i * GAMMA``
for a running counter ``i``, so a draw of ``n`` values is a single
vectorized evaluation. Uniforms take the top 53 bits and are offset by half
an ulp into the open interval (0, 1); normals use the Box-Muller transform
on consecutive uniform pairs. The integer sequence is bit-identical on every
platform; normals additionally depend on the platform's ``log``/``cos``/``sin``.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import ContractError
from .tensor import Tensor

_MASK = (1 << 64) - 1
GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x):
    """SplitMix64 finalizer over a uint64 array."""
    z = np.asarray(x, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    def __init__(self, seed):
        self.seed = int(seed) & _MASK
        self._base = np.uint64(self.seed)
        self.counter = 0

    def spawn(self, label):
        """Independent child stream keyed by ``label``; does not advance this stream."""
        h = hashlib.blake2b(f"{self.seed}:{label}".encode(), digest_size=8).digest()
        return Rng(int.from_bytes(h, "little"))

    def next_u64(self, n):
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return splitmix64(self._base + idx * GAMMA)

    def uniform(self, n):
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)

    def normal(self, n):
        if n < 1:
            raise ContractError(f"normal: need n >= 1, got {n}")
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, high, n):
        """``n`` integers uniform on ``[0, high)``."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")


def sample_latents(rng, n, dim):
    """An (n, dim) tensor of i.i.d. standard normals."""
    if n < 1 or dim < 1:
        raise ContractError(f"sample_latents: n and dim must be >= 1, got n={n}, dim={dim}")
    return Tensor(rng.normal(n * dim).reshape(n, dim))
