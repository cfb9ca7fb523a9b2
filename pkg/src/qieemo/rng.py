"""Deterministic random number generation for corpus synthesis and parameter init.

Python's builtin hash() is salted per process and numpy's bit generators are
an implementation detail of the numpy version, so everything that must be
byte-reproducible (corpus files, parameter initialization) runs on a fixed,
self-contained generator: a xoshiro256** stream whose state is expanded from
the user seed with splitmix64. Test vectors for both primitives live in the
test suite and in the README.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; a stable replacement for salted builtin hash()."""
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** generator, state seeded through splitmix64.

    Integer output is exactly reproducible on any platform; float draws are
    deterministic for a fixed libm/numpy build.
    """

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64_next(state)
            s.append(out)
        self._s = s

    def next_uint64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        # 53-bit mantissa fill; uniform on [0, 1)
        return (self.next_uint64() >> 11) * (1.0 / (1 << 53))

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive, by rejection sampling."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        span = high - low + 1
        # rejection threshold keeps the draw exactly uniform
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % span)
        while True:
            x = self.next_uint64()
            if x < limit:
                return low + (x % span)

    def normal(self) -> float:
        """Standard normal via Box-Muller on two uniform draws."""
        u1 = self.uniform()
        u2 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        out = np.array([self.normal() for _ in range(n)], dtype=np.float64)
        return out.reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]


def stream_for(seed: int, *tokens) -> Xoshiro256StarStar:
    """Derive an independent generator from a base seed plus context tokens.

    Tokens may be strings or ints; the derivation hashes them into the seed so
    per-utterance / per-speaker streams never overlap by construction.
    """
    mixed = seed & _MASK64
    for tok in tokens:
        if isinstance(tok, str):
            h = fnv1a64(tok.encode("utf-8"))
        elif isinstance(tok, (int, np.integer)):
            h = int(tok) & _MASK64
        else:
            raise TypeError(f"unsupported stream token type: {type(tok)!r}")
        mixed, out = splitmix64_next(mixed ^ h)
        mixed ^= out
    return Xoshiro256StarStar(mixed)
