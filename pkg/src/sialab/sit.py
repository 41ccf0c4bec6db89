"""Structure invariant transformation: random block partition, one transform per block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import FLOAT, SeededRng
from .transforms import (ALL_KINDS, DEFAULT_SETTINGS, TransformInstance, TransformKind,
                         TransformSettings, sample_transform)

MIN_BLOCK = 2


@dataclass(frozen=True)
class BlockPartition:
    height: int
    width: int
    row_cuts: tuple[int, ...]
    col_cuts: tuple[int, ...]

    def __post_init__(self):
        for name, cuts, n in (("row", self.row_cuts, self.height), ("col", self.col_cuts, self.width)):
            edges = (0, *cuts, n)
            if any(b - a < MIN_BLOCK for a, b in zip(edges, edges[1:])):
                raise ValueError(f"{name} cuts {cuts} leave a block thinner than {MIN_BLOCK} px")

    @property
    def s(self) -> int:
        return len(self.row_cuts) + 1

    @property
    def row_edges(self):
        return (0, *self.row_cuts, self.height)

    @property
    def col_edges(self):
        return (0, *self.col_cuts, self.width)

    def blocks(self) -> list[tuple[int, int, int, int]]:
        """``(r0, r1, c0, c1)`` half-open block bounds in row-major order."""
        re, ce = self.row_edges, self.col_edges
        return [(re[i], re[i + 1], ce[j], ce[j + 1])
                for i in range(len(re) - 1) for j in range(len(ce) - 1)]

    def anchors(self) -> list[tuple[float, float]]:
        return [((r0 + r1 - 1) / 2, (c0 + c1 - 1) / 2) for r0, r1, c0, c1 in self.blocks()]


def _random_cuts(n: int, s: int, rng: SeededRng) -> tuple[int, ...]:
    # Uniform over all valid cut sets: pick s-1 distinct slots from 1..n-s-1,
    # then spread them by their rank so every gap is at least 2.
    if s == 1:
        return ()
    slots = np.sort(rng.choice(n - s - 1, size=s - 1, replace=False) + 1)
    return tuple(int(b) + k for k, b in enumerate(slots, start=1))


def sample_partition(height: int, width: int, s: int, rng: SeededRng | None = None,
                     mode: str = "random") -> BlockPartition:
    if s < 1:
        raise ValueError("s must be at least 1")
    if height < MIN_BLOCK * s or width < MIN_BLOCK * s:
        raise ValueError(f"{height}x{width} image is too small for {s}x{s} blocks")
    if mode == "uniform":
        rows = tuple(k * height // s for k in range(1, s))
        cols = tuple(k * width // s for k in range(1, s))
    elif mode == "random":
        if rng is None:
            raise ValueError("random partitioning needs an rng")
        rows = _random_cuts(height, s, rng)
        cols = _random_cuts(width, s, rng)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return BlockPartition(height, width, rows, cols)


@dataclass(eq=False)
class SitInstance:
    partition: BlockPartition
    assignments: tuple[TransformInstance, ...]
    channels: int

    @property
    def image_shape(self):
        return (self.channels, self.partition.height, self.partition.width)

    def _check(self, x):
        x = np.asarray(x)
        if x.shape != self.image_shape:
            raise ValueError(f"image shape {x.shape} does not match {self.image_shape}")
        return x.astype(FLOAT, copy=False)

    def apply(self, x):
        x = self._check(x)
        out = np.empty_like(x)
        for (r0, r1, c0, c1), t in zip(self.partition.blocks(), self.assignments):
            out[:, r0:r1, c0:c1] = t.apply(x[:, r0:r1, c0:c1])
        return out

    def adjoint(self, g):
        g = self._check(g)
        out = np.empty_like(g)
        for (r0, r1, c0, c1), t in zip(self.partition.blocks(), self.assignments):
            out[:, r0:r1, c0:c1] = t.adjoint(g[:, r0:r1, c0:c1])
        return out


@dataclass(eq=False)
class TransformChain:
    """Whole-image transforms applied in sequence; the adjoint runs them in reverse."""

    transforms: tuple[TransformInstance, ...]

    def __len__(self):
        return len(self.transforms)

    def __iter__(self):
        return iter(self.transforms)

    def __getitem__(self, i):
        return self.transforms[i]

    def apply(self, x):
        out = np.asarray(x, dtype=FLOAT)
        for t in self.transforms:
            out = t.apply(out)
        return out

    def adjoint(self, g):
        out = np.asarray(g, dtype=FLOAT)
        for t in reversed(self.transforms):
            out = t.adjoint(out)
        return out


def _draw(kinds: Sequence[TransformKind], shape, rng, settings):
    kind = kinds[rng.integers(0, len(kinds))]
    return sample_transform(kind, shape, rng, settings)


def sit_sample(image_shape, s: int, rng: SeededRng,
               kinds: Sequence[TransformKind] = ALL_KINDS,
               settings: TransformSettings = DEFAULT_SETTINGS,
               mode: str = "random") -> SitInstance:
    if not kinds:
        raise ValueError("need at least one transform kind")
    c, h, w = image_shape
    part = sample_partition(h, w, s, rng, mode)
    assignments = tuple(_draw(kinds, (c, r1 - r0, c1 - c0), rng, settings)
                        for r0, r1, c0, c1 in part.blocks())
    return SitInstance(part, assignments, c)


def sit_global_sample(image_shape, s: int, rng: SeededRng,
                      kinds: Sequence[TransformKind] = ALL_KINDS,
                      settings: TransformSettings = DEFAULT_SETTINGS) -> TransformChain:
    if not kinds:
        raise ValueError("need at least one transform kind")
    if s < 1:
        raise ValueError("s must be at least 1")
    shape = tuple(image_shape)
    return TransformChain(tuple(_draw(kinds, shape, rng, settings) for _ in range(s * s)))


def sit_apply(inst, x):
    return inst.apply(x)


def sit_adjoint(inst, grad):
    return inst.adjoint(grad)
