"""Attack success rate and the layerwise feature-distance diversity score."""

from __future__ import annotations

import math

import numpy as np


def attack_success_rate(victim, adversarials, labels) -> float:
    """Fraction of ``adversarials`` the victim does not label as ``labels``."""
    adversarials = np.asarray(adversarials)
    labels = np.asarray(labels)
    if len(adversarials) != len(labels):
        raise ValueError(f"{len(adversarials)} adversarials but {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("cannot score an empty set of adversarials")
    pred = victim.classify(adversarials)
    return float(np.mean(np.asarray(pred) != labels))


def _sites(z):
    # Channel vectors per spatial site: (C, H, W) -> (H*W, C); dense maps (F,) -> one site.
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :]
    return z.reshape(z.shape[0], -1).T


def diversity_score(extractor, x, x_hat) -> float:
    """Sum over layers and sites of ``||z - z_hat||_2`` across channels, over input H*W."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    h, w = x.shape[-2:]
    total = 0.0
    for z, z_hat in zip(extractor.features(x), extractor.features(x_hat)):
        total += float(np.linalg.norm(_sites(z) - _sites(z_hat), axis=1).sum())
    return total / (h * w)


def binomial_diff_ci(p1: float, p2: float, n1: int, n2: int, z: float = 1.959964) -> tuple[float, float]:
    """Normal-approximation 95% interval for ``p1 - p2`` of two independent proportions."""
    se = math.sqrt(p1 * (1 - p1) / n1 + p2 * (1 - p2) / n2)
    d = p1 - p2
    return d - z * se, d + z * se


def paired_diff_ci(success_a, success_b, z: float = 1.959964) -> tuple[float, float]:
    """95% interval for the mean of paired 0/1 differences (same images, two attacks)."""
    d = np.asarray(success_a, dtype=np.float64) - np.asarray(success_b, dtype=np.float64)
    n = len(d)
    se = d.std(ddof=1) / math.sqrt(n) if n > 1 else float("inf")
    return float(d.mean() - z * se), float(d.mean() + z * se)
