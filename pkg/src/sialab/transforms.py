"""Block-level image transformations with exact adjoints.

Every transformation acts on one ``(C, H, W)`` block and is affine in the
block's pixels, so its vector-Jacobian product is a fixed matrix transpose.
The one exception is ``AddNoise``: its clip makes it piecewise affine, and the
pass-through mask recorded by the last :func:`apply` call selects the piece.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import FLOAT, SeededRng


class TransformKind(str, enum.Enum):
    VSHIFT = "VShift"
    HSHIFT = "HShift"
    VFLIP = "VFlip"
    HFLIP = "HFlip"
    ROTATE180 = "Rotate180"
    SCALE = "Scale"
    ADD_NOISE = "AddNoise"
    RESIZE = "Resize"
    DCT_FILTER = "DctFilter"
    DROPOUT = "Dropout"

    @classmethod
    def parse(cls, name: str) -> "TransformKind":
        key = name.strip().lower().replace("_", "").replace("-", "")
        for kind in cls:
            if kind.value.lower() == key or kind.name.lower().replace("_", "") == key:
                return kind
        raise ValueError(f"unknown transform kind {name!r}")


ALL_KINDS: tuple[TransformKind, ...] = tuple(TransformKind)
PERMUTATION_KINDS = frozenset(
    {TransformKind.VSHIFT, TransformKind.HSHIFT, TransformKind.VFLIP,
     TransformKind.HFLIP, TransformKind.ROTATE180}
)


@dataclass(frozen=True)
class TransformSettings:
    """Knobs for the random draws; defaults follow the literal transformation rules."""

    noise_amplitude: float = 1.0
    scale_margin: float = 1e-3
    dct_mask_fraction: float = 0.4
    dropout_prob: float = 0.1


DEFAULT_SETTINGS = TransformSettings()


# -- DCT ---------------------------------------------------------------------

@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``D`` with ``X = D @ x``; the inverse is ``D.T``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    d[0, :] = np.sqrt(1.0 / n)
    d.flags.writeable = False
    return d


def dct2(block):
    """Orthonormal 2-D DCT-II over the last two axes."""
    block = np.asarray(block)
    h, w = block.shape[-2:]
    out = dct_matrix(h) @ block.astype(np.float64) @ dct_matrix(w).T
    return out.astype(FLOAT)


def idct2(coeffs):
    coeffs = np.asarray(coeffs)
    h, w = coeffs.shape[-2:]
    out = dct_matrix(h).T @ coeffs.astype(np.float64) @ dct_matrix(w)
    return out.astype(FLOAT)


@lru_cache(maxsize=None)
def dct_keep_mask(h: int, w: int, fraction: float = 0.4) -> np.ndarray:
    """1 for kept coefficients, 0 for the ``ceil(fraction*h*w)`` highest frequencies.

    Frequency is ranked by ``u + v``; ties go to larger ``u`` then larger ``v``.
    """
    n_mask = math.ceil(round(fraction * h * w, 9))
    n_mask = min(n_mask, h * w - 1)
    order = sorted(((u, v) for u in range(h) for v in range(w)),
                   key=lambda uv: (uv[0] + uv[1], uv[0], uv[1]), reverse=True)
    mask = np.ones((h, w), dtype=FLOAT)
    for u, v in order[:n_mask]:
        mask[u, v] = 0.0
    mask.flags.writeable = False
    return mask


# -- bilinear resampling -----------------------------------------------------

@lru_cache(maxsize=None)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` 1-D bilinear interpolation matrix, half-pixel centres.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    clamped below at 0; it mixes ``i0 = floor(src)`` and ``min(i0 + 1, n_in - 1)``
    with weights ``1 - f`` and ``f``. Weights are scattered with ``np.add.at`` so
    a clamped neighbour accumulates both contributions.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.flags.writeable = False
    return m


def resize_bilinear(x, out_h: int, out_w: int):
    x = np.asarray(x)
    h, w = x.shape[-2:]
    out = bilinear_matrix(h, out_h) @ x.astype(np.float64) @ bilinear_matrix(w, out_w).T
    return out.astype(FLOAT)


def resize_bilinear_adjoint(g, in_h: int, in_w: int):
    g = np.asarray(g)
    out_h, out_w = g.shape[-2:]
    out = bilinear_matrix(in_h, out_h).T @ g.astype(np.float64) @ bilinear_matrix(in_w, out_w)
    return out.astype(FLOAT)


@lru_cache(maxsize=None)
def _round_trip_matrix(n: int, mid: int) -> np.ndarray:
    m = bilinear_matrix(mid, n) @ bilinear_matrix(n, mid)
    m.flags.writeable = False
    return m


# -- instances ---------------------------------------------------------------

def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=FLOAT)
    a.flags.writeable = False
    return a


@dataclass(eq=False)
class TransformInstance:
    """One sampled transformation with all of its randomness frozen."""

    kind: TransformKind
    block_shape: tuple[int, int, int]
    params: dict = field(default_factory=dict)
    _pass_mask: np.ndarray | None = field(default=None, repr=False)

    def _check(self, x, what):
        x = np.asarray(x)
        if x.shape != tuple(self.block_shape):
            raise ValueError(f"{what} shape {x.shape} does not match block shape {self.block_shape}")
        return x

    def apply(self, x) -> np.ndarray:
        x = self._check(x, "input").astype(FLOAT, copy=False)
        if self.kind is TransformKind.ADD_NOISE:
            pre = x + self.params["noise"]
            mask = ((pre >= 0.0) & (pre <= 1.0)).astype(FLOAT)
            mask.flags.writeable = False
            self._pass_mask = mask
            return np.clip(pre, 0.0, 1.0).astype(FLOAT)
        return self._linear(x)

    def linear(self, v) -> np.ndarray:
        """Jacobian-vector product at the last applied point (``A @ v`` for affine kinds)."""
        v = self._check(v, "tangent").astype(FLOAT, copy=False)
        if self.kind is TransformKind.ADD_NOISE:
            return (v * self._noise_mask()).astype(FLOAT)
        return self._linear(v)

    def _noise_mask(self):
        if self._pass_mask is None:
            raise RuntimeError("AddNoise adjoint needs a prior apply() to record its clip mask")
        return self._pass_mask

    def _linear(self, x):
        k, p = self.kind, self.params
        if k is TransformKind.VSHIFT:
            return np.roll(x, p["offset"], axis=-2)
        if k is TransformKind.HSHIFT:
            return np.roll(x, p["offset"], axis=-1)
        if k is TransformKind.VFLIP:
            return x[..., ::-1, :].copy()
        if k is TransformKind.HFLIP:
            return x[..., :, ::-1].copy()
        if k is TransformKind.ROTATE180:
            return x[..., ::-1, ::-1].copy()
        if k is TransformKind.SCALE:
            return (x * FLOAT(p["factor"])).astype(FLOAT)
        if k is TransformKind.RESIZE:
            _, h, w = self.block_shape
            ph = _round_trip_matrix(h, p["size"][0])
            pw = _round_trip_matrix(w, p["size"][1])
            return (ph @ x.astype(np.float64) @ pw.T).astype(FLOAT)
        if k is TransformKind.DCT_FILTER:
            return idct2(dct2(x) * p["mask"])
        if k is TransformKind.DROPOUT:
            return (x * p["mask"]).astype(FLOAT)
        raise AssertionError(k)

    def adjoint(self, g) -> np.ndarray:
        g = self._check(g, "gradient").astype(FLOAT, copy=False)
        k, p = self.kind, self.params
        if k is TransformKind.VSHIFT:
            return np.roll(g, -p["offset"], axis=-2)
        if k is TransformKind.HSHIFT:
            return np.roll(g, -p["offset"], axis=-1)
        if k is TransformKind.ADD_NOISE:
            return (g * self._noise_mask()).astype(FLOAT)
        if k is TransformKind.RESIZE:
            _, h, w = self.block_shape
            ph = _round_trip_matrix(h, p["size"][0])
            pw = _round_trip_matrix(w, p["size"][1])
            return (ph.T @ g.astype(np.float64) @ pw).astype(FLOAT)
        # flips, rotation, scale, DCT filter and dropout are self-adjoint
        return self._linear(g)


def sample_transform(kind: TransformKind, block_shape, rng: SeededRng,
                     settings: TransformSettings = DEFAULT_SETTINGS) -> TransformInstance:
    kind = TransformKind(kind)
    c, h, w = (int(v) for v in block_shape)
    if h < 2 or w < 2:
        raise ValueError(f"block {h}x{w} is too small to transform (need at least 2x2)")
    shape = (c, h, w)
    params: dict = {}
    if kind is TransformKind.VSHIFT:
        params["offset"] = rng.integers(1, h)
    elif kind is TransformKind.HSHIFT:
        params["offset"] = rng.integers(1, w)
    elif kind is TransformKind.SCALE:
        d = settings.scale_margin
        params["factor"] = rng.uniform(d, 1.0 - d)
    elif kind is TransformKind.ADD_NOISE:
        params["noise"] = _frozen(rng.uniform(0.0, settings.noise_amplitude, size=shape))
    elif kind is TransformKind.RESIZE:
        params["size"] = (rng.integers(math.ceil(h / 2), h), rng.integers(math.ceil(w / 2), w))
    elif kind is TransformKind.DCT_FILTER:
        params["mask"] = dct_keep_mask(h, w, settings.dct_mask_fraction)
    elif kind is TransformKind.DROPOUT:
        params["mask"] = _frozen(rng.uniform(0.0, 1.0, size=(h, w)) >= settings.dropout_prob)
    return TransformInstance(kind, shape, params)


def apply(t: TransformInstance, block) -> np.ndarray:
    return t.apply(block)


def adjoint(t: TransformInstance, grad) -> np.ndarray:
    return t.adjoint(grad)


def materialize(t: TransformInstance) -> np.ndarray:
    """Explicit Jacobian matrix of ``t``, built column by column from basis vectors."""
    n = int(np.prod(t.block_shape))
    a = np.zeros((n, n), dtype=np.float64)
    for j in range(n):
        e = np.zeros(n, dtype=FLOAT)
        e[j] = 1.0
        a[:, j] = t.linear(e.reshape(t.block_shape)).ravel()
    return a
