"""Seeded xoshiro256++ streams.

State is filled from a splitmix64 sequence, so stream 0 of seed ``s`` yields
the same words as ``Xoshiro256PlusPlus::seed_from_u64(s)`` in rust's
``rand_xoshiro``.  Other stream ids perturb the splitmix seed through the
splitmix finalizer (which maps 0 to 0).
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix64(self.state)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class RngStream:
    """xoshiro256++ generator identified by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream id must be unsigned 64-bit integers")
        self.seed = seed & MASK64
        self.stream_id = stream_id & MASK64
        sm = SplitMix64(self.seed ^ _mix64(self.stream_id))
        self.s = [sm.next_u64() for _ in range(4)]

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_stream(seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(seed, stream_id)


def _shape_size(shape) -> int:
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    return shape, int(np.prod(shape, dtype=np.int64))


def draw_uniform(stream: RngStream, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    shape, n = _shape_size(shape)
    u = np.fromiter((stream.random() for _ in range(n)), dtype=np.float64, count=n)
    return (low + (high - low) * u).reshape(shape)


def draw_normal(stream: RngStream, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Box-Muller normals; both members of each pair are used."""
    shape, n = _shape_size(shape)
    out = np.empty(n + (n % 2), dtype=np.float64)
    for k in range(0, n, 2):
        u1 = 1.0 - stream.random()  # (0, 1], keeps log finite
        u2 = stream.random()
        r = math.sqrt(-2.0 * math.log(u1))
        out[k] = r * math.cos(2.0 * math.pi * u2)
        out[k + 1] = r * math.sin(2.0 * math.pi * u2)
    return (mean + std * out[:n]).reshape(shape)
