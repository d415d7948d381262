"""Seeded random streams: splitmix64 seeding, xoshiro256++ generation.

Every stochastic step in the package draws from an :class:`RngStream`
identified by ``(seed, tag)``. Streams with different tags are seeded from
disjoint splitmix64 expansions, so they never share state.

Uniforms take the top 53 bits of a xoshiro256++ output. A Gaussian draw
consumes two uniforms through the Box-Muller cosine branch.
"""

from __future__ import annotations

import math

import numba
import numpy as np

MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << numba.uint64(k)) | (x >> numba.uint64(64 - k))


@numba.njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s0 + s3, 23) + s0
        t = s1 << numba.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


@numba.njit(cache=True)
def _box_muller(raw, out):
    scale = 1.0 / 9007199254740992.0
    two_pi = 2.0 * math.pi
    for i in range(out.shape[0]):
        u1 = 1.0 - float(raw[2 * i] >> numba.uint64(11)) * scale
        u2 = float(raw[2 * i + 1] >> numba.uint64(11)) * scale
        out[i] = math.sqrt(-2.0 * math.log(u1)) * math.cos(two_pi * u2)


class RngStream:
    """A reproducible xoshiro256++ stream keyed by ``(seed, tag)``.

    ``counter`` counts 64-bit words consumed since construction, so
    ``(seed, tag, counter)`` pins down the next draw.
    """

    def __init__(self, seed: int, tag: str = ""):
        if not 0 <= int(seed) <= MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.tag = str(tag)
        sm = self.seed ^ fnv1a64(self.tag)
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)
        self.counter = 0

    def child(self, tag: str) -> "RngStream":
        return RngStream(self.seed, f"{self.tag}/{tag}" if self.tag else tag)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill_u64(self._state, out)
        self.counter += int(n)
        return out

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws on [0, 1)."""
        n = 1 if size is None else int(np.prod(size, dtype=np.int64))
        raw = self.next_u64(n)
        vals = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(vals[0]) if size is None else vals.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal draws (two uniforms per value)."""
        n = 1 if size is None else int(np.prod(size, dtype=np.int64))
        raw = self.next_u64(2 * n)
        out = np.empty(n, dtype=np.float64)
        if n:
            _box_muller(raw, out)
        return float(out[0]) if size is None else out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly at random."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n}")
        return self.permutation(n)[:k]

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "tag": self.tag,
            "state": [int(w) for w in self._state],
            "counter": self.counter,
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        stream = cls(state["seed"], state["tag"])
        stream._state = np.array(state["state"], dtype=np.uint64)
        stream.counter = int(state["counter"])
        return stream
