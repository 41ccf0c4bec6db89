"""Elementwise primitives and the seeded random generator used across the package.

Images are numpy ``float32`` arrays in channel-height-width order. Reductions
accumulate in ``float64`` and round back on return.

Random numbers come from Philox4x64-10, numpy's counter-based bit generator,
keyed by a 128-bit value. A generator with seed ``s`` and stream path
``(i0, i1, ...)`` has key ``mix(...mix(mix(s, 0), i0)..., ik)`` where ``mix`` is
SplitMix64 finalisation of ``parent_key XOR golden*(id+1)`` run twice to fill
the high and low halves. Deriving a substream never touches the parent's counter.
"""

from __future__ import annotations

import numpy as np

FLOAT = np.float32

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def clip(t, lo=0.0, hi=1.0):
    if lo > hi:
        raise ValueError(f"clip interval is empty: lo={lo} > hi={hi}")
    t = np.asarray(t)
    return np.clip(t, lo, hi).astype(t.dtype if t.dtype.kind == "f" else FLOAT, copy=False)


def sign(t):
    t = np.asarray(t)
    return np.sign(t).astype(t.dtype if t.dtype.kind == "f" else FLOAT, copy=False)


def l1_norm(t) -> float:
    return float(np.abs(np.asarray(t, dtype=np.float64)).sum())


def dot(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in dot: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel().astype(np.float64), b.ravel().astype(np.float64)))


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_key(key: int, stream_id: int) -> int:
    """Derive a child 128-bit Philox key from a parent key and an integer label."""
    if stream_id < 0:
        raise ValueError("stream_id must be non-negative")
    base = (key ^ (key >> 64) ^ ((_GOLDEN * (stream_id + 1)) & _MASK64)) & _MASK64
    hi = _splitmix64(base)
    lo = _splitmix64(hi ^ base)
    return (hi << 64) | lo


class SeededRng:
    """Single-owner random stream. Share work across threads with :meth:`substream`."""

    def __init__(self, seed: int, stream_id: int = 0, *, _key: int | None = None):
        if _key is None:
            if seed < 0:
                raise ValueError("seed must be non-negative")
            _key = mix_key(seed & _MASK64, stream_id)
        self.seed = seed
        self.stream_id = stream_id
        self.key = _key
        self._gen = np.random.Generator(np.random.Philox(key=_key))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id}, key=0x{self.key:032x})"

    def substream(self, stream_id: int) -> "SeededRng":
        return SeededRng(self.seed, stream_id, _key=mix_key(self.key, stream_id))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if not lo < hi:
            raise ValueError(f"empty uniform range [{lo}, {hi})")
        out = self._gen.uniform(lo, hi, size)
        return float(out) if size is None else out

    def integers(self, lo: int, hi_exclusive: int, size=None):
        if not lo < hi_exclusive:
            raise ValueError(f"empty integer range [{lo}, {hi_exclusive})")
        out = self._gen.integers(lo, hi_exclusive, size)
        return int(out) if size is None else out

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def choice(self, n: int, size: int, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int):
        return self._gen.permutation(n)


def rng_uniform(r: SeededRng, lo: float, hi: float) -> float:
    return r.uniform(lo, hi)


def rng_int(r: SeededRng, lo: int, hi_exclusive: int) -> int:
    return r.integers(lo, hi_exclusive)


def rng_substream(r: SeededRng, stream_id: int) -> SeededRng:
    return r.substream(stream_id)
