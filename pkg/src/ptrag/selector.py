"""Straight-through Gumbel-Softmax include/exclude selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EXCLUDE, INCLUDE = 0, 1
_U_CLAMP = 1e-12


@dataclass
class SelectionMask:
    hard: np.ndarray      # [..., K] in {0, 1}
    soft: np.ndarray      # [..., K] include probability
    tau: float
    weights: Tensor       # value == hard, gradient via soft
    noise: np.ndarray     # [..., K, 2] Gumbel draws used

    @property
    def selected_count(self) -> float:
        """Mean number of included candidates per cell."""
        return float(self.hard.sum(axis=-1).mean())


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    return gumbel_from_uniform(rng.random(shape))


def gumbel_softmax_select(logits, tau: float, rng: np.random.Generator | None = None,
                          deterministic_noise: bool = False, noise=None) -> SelectionMask:
    """Per-entry binary selection from ``[..., 2]`` (exclude, include) logits.

    ``noise`` freezes the Gumbel draws; ``deterministic_noise`` sets them to 0.
    Exact ties go to include.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    logits = ad.as_tensor(logits)
    if logits.shape[-1] != 2:
        raise ad.ShapeError(f"selection logits need a trailing axis of 2, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("selection logits must be finite")
    if noise is not None:
        g = np.asarray(noise, dtype=np.float64)
    elif deterministic_noise:
        g = np.zeros(logits.shape)
    else:
        if rng is None:
            raise ValueError("an rng is required unless noise is frozen")
        g = sample_gumbel(logits.shape, rng)
    perturbed = ad.add(logits, g)
    probs = ad.softmax(ad.scale(perturbed, 1.0 / tau))
    soft = ad.index(probs, (Ellipsis, INCLUDE))
    pd = perturbed.data
    hard = (pd[..., INCLUDE] >= pd[..., EXCLUDE]).astype(np.float64)
    weights = ad.straight_through(Tensor(hard), soft)
    return SelectionMask(hard=hard, soft=soft.data, tau=float(tau), weights=weights, noise=g)
