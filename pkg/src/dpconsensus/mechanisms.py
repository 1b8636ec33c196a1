"""Per-query privatization: Poisson lots, clipping and Gaussian noise."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatchError


@dataclass(frozen=True)
class DpConfig:
    """Clipping norm, noise multiplier and expected lot size for one agent.

    ``clip_norm`` may be ``math.inf`` to disable clipping.
    """

    clip_norm: float
    noise_multiplier: float
    lot_size: int
    dataset_size: int

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if self.lot_size < 1 or self.dataset_size < 1:
            raise ValueError("lot_size and dataset_size must be positive")
        if self.lot_size > self.dataset_size:
            raise ValueError(
                f"lot_size {self.lot_size} exceeds dataset_size {self.dataset_size}"
            )

    @property
    def sample_rate(self) -> float:
        return self.lot_size / self.dataset_size

    @property
    def noise_std(self) -> float:
        """Per-coordinate standard deviation of the added noise."""
        if self.noise_multiplier == 0:
            return 0.0
        return self.noise_multiplier * self.clip_norm / self.lot_size


@dataclass(frozen=True)
class NoisyGradient:
    vector: np.ndarray
    lot_actual: int


def clip(v: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scales ``v`` down to ``clip_norm`` if its l2 norm exceeds it."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= clip_norm:
        return v.copy()
    return v * (clip_norm / norm)


def clip_factors(norms: np.ndarray, clip_norm: float) -> np.ndarray:
    """Vectorized ``min(1, C / ||v||)``; exactly 1.0 for unclipped rows."""
    norms = np.asarray(norms, dtype=np.float64)
    out = np.ones_like(norms)
    big = norms > clip_norm
    out[big] = clip_norm / norms[big]
    return out


def sample_lot(dataset_size: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson sampling: each index kept independently with probability ``q``."""
    if not 0 < q <= 1:
        raise ValueError(f"sampling probability must lie in (0, 1], got {q}")
    if q == 1:
        return np.arange(dataset_size)
    return np.flatnonzero(rng.random(dataset_size) < q)


def add_noise(
    clipped_sum: np.ndarray, cfg: DpConfig, rng: np.random.Generator | None
) -> np.ndarray:
    """``clipped_sum / L + (sigma C / L) xi``, dividing by the nominal lot size."""
    out = clipped_sum / cfg.lot_size
    if cfg.noise_multiplier > 0:
        if math.isinf(cfg.clip_norm):
            raise ValueError("noise requires a finite clip_norm")
        out = out + cfg.noise_std * rng.standard_normal(out.shape)
    return out


def privatize(
    per_sample_grads: Sequence[np.ndarray] | np.ndarray,
    cfg: DpConfig,
    rng: np.random.Generator,
    dim: int | None = None,
) -> NoisyGradient:
    """Clips each per-sample gradient, sums, divides by ``L`` and adds noise.

    An empty lot yields pure noise, in which case ``dim`` must be given. The
    divisor is the nominal lot size even when the realized lot is smaller,
    which keeps one sample's influence bounded by ``C / L``.
    """
    grads = [np.asarray(g, dtype=np.float64).ravel() for g in per_sample_grads]
    if dim is None:
        if not grads:
            raise ValueError("empty lot: pass dim to size the noise vector")
        dim = grads[0].size
    if any(g.size != dim for g in grads):
        raise DimensionMismatchError(f"per-sample gradients must all have dimension {dim}")
    if not grads:
        return NoisyGradient(add_noise(np.zeros(dim), cfg, rng), 0)
    stacked = np.stack(grads)
    factors = clip_factors(np.linalg.norm(stacked, axis=1), cfg.clip_norm)
    clipped_sum = (stacked * factors[:, None]).sum(axis=0)
    return NoisyGradient(add_noise(clipped_sum, cfg, rng), len(grads))
