"""Momentum iterative attacks with pluggable input transformations.

Every method shares one loop. Per iteration it builds a set of transformed
copies of the current iterate, evaluates the surrogate gradient on each copy,
pulls each gradient back through its transformation's adjoint and averages
the results. A method only decides which copies to build.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
from scipy.signal import convolve2d

from . import transforms as tf
from .numerics import FLOAT, SeededRng, clip, l1_norm, sign
from .sit import sit_global_sample, sit_sample
from .transforms import ALL_KINDS, TransformKind, TransformSettings

log = logging.getLogger(__name__)

METHODS = ("MIFGSM", "SIA", "SIA_GLOBAL", "DIM", "TIM", "SIM", "DEM", "ADMIX", "SSA")
DEM_RATIOS = (1.14, 1.27, 1.4, 1.53, 1.66)


class AttackConfigError(ValueError):
    pass


def parse_method(name: str) -> str:
    key = name.strip().upper().replace("-", "_")
    if key not in METHODS:
        raise AttackConfigError(f"unknown attack method {name!r}; expected one of {', '.join(METHODS)}")
    return key


@dataclass(frozen=True)
class AttackConfig:
    method: str = "SIA"
    epsilon: float = 16 / 255
    steps: int = 10
    step_size: float | None = None
    decay: float = 1.0
    blocks: int = 3
    copies: int = 20
    master_seed: int = 0
    # SIA / SIA_GLOBAL
    kinds: tuple[TransformKind, ...] = ALL_KINDS
    partition_mode: str = "random"
    noise_amplitude: float = 1.0
    # "pullback" differentiates through the transform; "direct" uses the copy's gradient as is
    gradient_mode: str = "pullback"
    # baselines
    dim_prob: float = 0.5
    dim_min_ratio: float = 0.9
    tim_kernel: int = 7
    tim_sigma: float = 3.0
    sim_scales: int = 5
    dem_ratios: tuple[float, ...] = DEM_RATIOS
    admix_strength: float = 0.2
    admix_count: int = 3
    admix_scales: int = 5
    ssa_rho: float = 0.5
    ssa_sigma: float | None = None
    ssa_copies: int = 20
    record_tensors: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", parse_method(self.method))
        object.__setattr__(self, "kinds", tuple(TransformKind(k) for k in self.kinds))
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be non-negative")
        if self.steps < 1 or self.copies < 1 or self.blocks < 1:
            raise AttackConfigError("steps, copies and blocks must all be at least 1")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackConfigError("step_size must be positive")
        if not self.kinds:
            raise AttackConfigError("kinds must not be empty")
        if self.gradient_mode not in ("pullback", "direct"):
            raise AttackConfigError(f"unknown gradient_mode {self.gradient_mode!r}")

    @property
    def alpha(self) -> float:
        return self.epsilon / self.steps if self.step_size is None else self.step_size

    @property
    def transform_settings(self) -> TransformSettings:
        return TransformSettings(noise_amplitude=self.noise_amplitude)

    def replace(self, **changes) -> "AttackConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "kinds":
                v = [k.value for k in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        out["alpha"] = self.alpha
        out["epsilon_255"] = self.epsilon * 255
        return out


# -- copy construction -------------------------------------------------------

@dataclass
class CopySet:
    """Transformed inputs plus the pullback that maps each copy's gradient back to x."""

    inputs: list
    pullbacks: list
    post: Callable | None = None


def _identity(g):
    return g


def _scaled(factor):
    f = FLOAT(factor)
    return lambda g: (g * f).astype(FLOAT)


def _copies_mifgsm(x, y, cfg, rng, ctx):
    return CopySet([x], [_identity])


def _copies_sia(x, y, cfg, rng, ctx):
    insts = [sit_sample(x.shape, cfg.blocks, rng, cfg.kinds, cfg.transform_settings, cfg.partition_mode)
             for _ in range(cfg.copies)]
    return CopySet([i.apply(x) for i in insts], [i.adjoint for i in insts])


def _copies_sia_global(x, y, cfg, rng, ctx):
    chains = [sit_global_sample(x.shape, cfg.blocks, rng, cfg.kinds, cfg.transform_settings)
              for _ in range(cfg.copies)]
    return CopySet([c.apply(x) for c in chains], [c.adjoint for c in chains])


class ResizePad:
    """Shrink bilinearly to ``size`` then zero-pad at ``offset`` back to the input size."""

    def __init__(self, shape, size, offset):
        self.shape, self.size, self.offset = shape, size, offset

    def apply(self, x):
        _, h, w = self.shape
        (rh, rw), (top, left) = self.size, self.offset
        out = np.zeros(self.shape, dtype=FLOAT)
        out[:, top:top + rh, left:left + rw] = tf.resize_bilinear(x, rh, rw)
        return out

    def adjoint(self, g):
        _, h, w = self.shape
        (rh, rw), (top, left) = self.size, self.offset
        return tf.resize_bilinear_adjoint(g[:, top:top + rh, left:left + rw], h, w)


class ResizeCrop:
    """Upscale bilinearly to ``size`` then take the centred crop of the input size."""

    def __init__(self, shape, size):
        self.shape, self.size = shape, size

    def _offsets(self):
        _, h, w = self.shape
        return (self.size[0] - h) // 2, (self.size[1] - w) // 2

    def apply(self, x):
        _, h, w = self.shape
        top, left = self._offsets()
        big = tf.resize_bilinear(x, *self.size)
        return big[:, top:top + h, left:left + w].copy()

    def adjoint(self, g):
        _, h, w = self.shape
        top, left = self._offsets()
        big = np.zeros((self.shape[0], *self.size), dtype=FLOAT)
        big[:, top:top + h, left:left + w] = g
        return tf.resize_bilinear_adjoint(big, h, w)


def _copies_dim(x, y, cfg, rng, ctx):
    _, h, w = x.shape
    if rng.uniform() >= cfg.dim_prob:
        return CopySet([x], [_identity])
    lo_h, lo_w = math.ceil(cfg.dim_min_ratio * h), math.ceil(cfg.dim_min_ratio * w)
    rh = rng.integers(min(lo_h, h - 1), h)
    rw = rng.integers(min(lo_w, w - 1), w)
    op = ResizePad(x.shape, (rh, rw), (rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)))
    return CopySet([op.apply(x)], [op.adjoint])


def gaussian_kernel(size: int = 7, sigma: float = 3.0) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k1 = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(k1, k1)
    return k / k.sum()


def _copies_tim(x, y, cfg, rng, ctx):
    kernel = gaussian_kernel(cfg.tim_kernel, cfg.tim_sigma)

    def smooth(g):
        return np.stack([convolve2d(ch, kernel, mode="same") for ch in g]).astype(FLOAT)

    return CopySet([x], [_identity], post=smooth)


def _copies_sim(x, y, cfg, rng, ctx):
    factors = [2.0 ** -i for i in range(cfg.sim_scales)]
    return CopySet([(x * FLOAT(f)).astype(FLOAT) for f in factors], [_scaled(f) for f in factors])


def _copies_dem(x, y, cfg, rng, ctx):
    _, h, w = x.shape
    ops = [ResizeCrop(x.shape, (int(round(r * h)), int(round(r * w)))) for r in cfg.dem_ratios]
    return CopySet([op.apply(x) for op in ops], [op.adjoint for op in ops])


def _copies_admix(x, y, cfg, rng, ctx):
    pool = ctx.get("admix_pool")
    if pool is None:
        raise AttackConfigError("ADMIX needs an add-in image pool (admix_pool)")
    images, labels = pool
    candidates = np.flatnonzero(np.asarray(labels) != y)
    if len(candidates) == 0:
        raise AttackConfigError("ADMIX add-in pool has no image from another class")
    picks = candidates[rng.choice(len(candidates), cfg.admix_count, replace=len(candidates) < cfg.admix_count)]
    inputs, pulls = [], []
    for j in picks:
        mixed = (x + FLOAT(cfg.admix_strength) * np.asarray(images[j], dtype=FLOAT)).astype(FLOAT)
        for i in range(cfg.admix_scales):
            f = 2.0 ** -i
            inputs.append((mixed * FLOAT(f)).astype(FLOAT))
            pulls.append(_scaled(f))
    return CopySet(inputs, pulls)


def _copies_ssa(x, y, cfg, rng, ctx):
    sigma = cfg.epsilon if cfg.ssa_sigma is None else cfg.ssa_sigma
    inputs, pulls = [], []
    for _ in range(cfg.ssa_copies):
        noise = rng.normal(0.0, sigma, size=x.shape) if sigma > 0 else 0.0
        mask = rng.uniform(1 - cfg.ssa_rho, 1 + cfg.ssa_rho, size=x.shape)
        inputs.append(tf.idct2(tf.dct2(x + noise) * mask))
        pulls.append(lambda g, m=mask: tf.idct2(tf.dct2(g) * m))
    return CopySet(inputs, pulls)


COPY_BUILDERS = {
    "MIFGSM": _copies_mifgsm,
    "SIA": _copies_sia,
    "SIA_GLOBAL": _copies_sia_global,
    "DIM": _copies_dim,
    "TIM": _copies_tim,
    "SIM": _copies_sim,
    "DEM": _copies_dem,
    "ADMIX": _copies_admix,
    "SSA": _copies_ssa,
}


def build_copies(method, x, y, cfg, rng, admix_pool=None) -> CopySet:
    return COPY_BUILDERS[parse_method(method)](np.asarray(x, dtype=FLOAT), y, cfg, rng,
                                               {"admix_pool": admix_pool})


# -- gradient estimation -----------------------------------------------------

def _as_list(oracles):
    if isinstance(oracles, (list, tuple)):
        if not oracles:
            raise ValueError("need at least one gradient oracle")
        return list(oracles)
    return [oracles]


def estimate_gradient(method, oracles, x_adv, y, cfg: AttackConfig, rng: SeededRng,
                      admix_pool=None, builder=None, return_loss=False):
    """Average pulled-back gradient over the method's transformed copies and the oracles."""
    oracles = _as_list(oracles)
    x_adv = np.asarray(x_adv, dtype=FLOAT)
    if builder is None:
        cs = build_copies(method, x_adv, y, cfg, rng, admix_pool)
    else:
        cs = builder(x_adv, y, cfg, rng, {"admix_pool": admix_pool})
    batch = np.stack(cs.inputs).astype(FLOAT)
    labels = np.full(len(batch), y, dtype=np.int64)
    total = np.zeros(x_adv.shape, dtype=np.float64)
    loss_sum = 0.0
    for oracle in oracles:
        losses, grads = oracle.loss_and_input_grad(batch, labels)
        loss_sum += float(np.mean(losses))
        acc = np.zeros(x_adv.shape, dtype=np.float64)
        for g, pull in zip(grads, cs.pullbacks):
            acc += pull(g) if cfg.gradient_mode == "pullback" else g
        total += acc / len(batch)
    gbar = (total / len(oracles)).astype(FLOAT)
    if cs.post is not None:
        gbar = cs.post(gbar)
    if return_loss:
        return gbar, loss_sum / len(oracles), len(batch)
    return gbar


# -- attack loop -------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    loss_mean: float
    grad_l1: float
    copies: int
    zero_gradient: bool = False
    gbar: np.ndarray | None = None
    momentum: np.ndarray | None = None


@dataclass
class AttackTrace:
    steps: list = field(default_factory=list)

    def to_dict(self):
        return [{"t": r.t, "loss_mean": r.loss_mean, "grad_l1": r.grad_l1,
                 "copies": r.copies, "zero_gradient": r.zero_gradient} for r in self.steps]


def _check_image(x):
    x = np.asarray(x, dtype=FLOAT)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("input image must lie in [0, 1]")
    return x


def attack(oracles, x, y, cfg: AttackConfig, rng: SeededRng | None = None,
           admix_pool=None, builder=None):
    """Run the momentum iterative attack; returns ``(x_adv, trace)``."""
    oracles = _as_list(oracles)
    x = _check_image(x)
    rng = SeededRng(cfg.master_seed) if rng is None else rng
    eps = FLOAT(cfg.epsilon)
    alpha = FLOAT(cfg.alpha)
    lo = np.maximum(x - eps, 0).astype(FLOAT)
    hi = np.minimum(x + eps, 1).astype(FLOAT)
    g = np.zeros_like(x)
    x_adv = x.copy()
    trace = AttackTrace()
    for t in range(cfg.steps):
        gbar, loss, n = estimate_gradient(cfg.method, oracles, x_adv, y, cfg, rng.substream(t),
                                          admix_pool=admix_pool, builder=builder, return_loss=True)
        norm = l1_norm(gbar)
        zero = norm == 0.0
        if zero:
            log.warning("zero gradient at iteration %d; momentum alone drives the step", t)
            g = (FLOAT(cfg.decay) * g).astype(FLOAT)
        else:
            g = (FLOAT(cfg.decay) * g + (gbar.astype(np.float64) / norm).astype(FLOAT)).astype(FLOAT)
        x_adv = clip(x_adv + alpha * sign(g), 0.0, 1.0)
        x_adv = np.minimum(np.maximum(x_adv, lo), hi)
        trace.steps.append(StepRecord(t, loss, norm, n, zero,
                                      gbar.copy() if cfg.record_tensors else None,
                                      g.copy() if cfg.record_tensors else None))
    return x_adv, trace


def attack_ensemble(oracles: Sequence, x, y, cfg: AttackConfig, rng=None, admix_pool=None):
    if not oracles:
        raise ValueError("ensemble needs at least one oracle")
    return attack(list(oracles), x, y, cfg, rng, admix_pool)


def attack_many(oracles, images, labels, cfg: AttackConfig, workers: int = 1,
                admix_pool=None, indices=None, builder=None):
    """Attack a batch of images; image ``i`` uses substream ``indices[i]`` of the master seed.

    Results do not depend on ``workers``.
    """
    images = np.asarray(images, dtype=FLOAT)
    labels = np.asarray(labels)
    indices = range(len(images)) if indices is None else indices
    root = SeededRng(cfg.master_seed)

    def one(args):
        idx, x, y = args
        return attack(oracles, x, int(y), cfg, root.substream(int(idx)), admix_pool, builder)

    jobs = list(zip(indices, images, labels))
    if workers <= 1:
        results = [one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    if not results:
        return np.zeros((0, *images.shape[1:]), dtype=FLOAT), []
    return np.stack([r[0] for r in results]), [r[1] for r in results]
