"""Per-token clipping and sensitivity-conditional Gaussian noise.

Gradients are flat float64 vectors. Token ``i`` of a sequence draws its noise
from ``rng.split(i)``, so a token's noise is fixed by the stream and its index
alone. Sums run in token order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .noise_policy import AnnotatedSequence, NoisePolicy
from .rng import RngStream


class NonFiniteGradientError(ValueError):
    pass


@dataclass(frozen=True)
class TierCounts:
    zero: int = 0
    low: int = 0
    high: int = 0

    def __add__(self, other: "TierCounts") -> "TierCounts":
        return TierCounts(self.zero + other.zero, self.low + other.low, self.high + other.high)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.zero, self.low, self.high)


def gradient_vector(values) -> np.ndarray:
    g = np.array(values, dtype=np.float64).reshape(-1)
    if not np.isfinite(g).all():
        raise NonFiniteGradientError(f"non-finite entry at index {int(np.argmin(np.isfinite(g)))}")
    return g


def _stack(grads: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    g = np.array(grads, dtype=np.float64, order="C", ndmin=2)
    if g.ndim != 2:
        raise ValueError("expected a list of flat gradient vectors")
    return g


def clip(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Return ``g * min(1, clip_norm / ||g||)``; a zero vector is returned as is."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    out = np.array(g, dtype=np.float64, order="C").reshape(1, -1)
    try:
        kernels.clip_rows(out, float(clip_norm))
    except ValueError as exc:
        raise NonFiniteGradientError(str(exc)) from None
    return out[0]


def clip_all(grads, clip_norm: float) -> tuple[np.ndarray, np.ndarray]:
    """Clip every row; returns the clipped rows and their scale factors."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    g = _stack(grads)
    try:
        factors = kernels.clip_rows(g, float(clip_norm))
    except ValueError as exc:
        raise NonFiniteGradientError(str(exc)) from None
    return g, factors


def noise(g_clipped: np.ndarray, sigma: float, clip_norm: float, rng: RngStream) -> np.ndarray:
    """Add N(0, (sigma * clip_norm)^2) to every coordinate; identity at sigma = 0."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    g = np.array(g_clipped, dtype=np.float64)
    if sigma == 0:
        return g
    out = g + (sigma * clip_norm) * rng.normal(g.size)
    if not np.isfinite(out).all():
        raise NonFiniteGradientError("noised gradient is not finite")
    return out


def classify_tiers(sigmas: np.ndarray, policy: NoisePolicy) -> TierCounts:
    sigmas = np.asarray(sigmas)
    zero = int((sigmas == 0).sum())
    low = int((sigmas == policy.sigma_low).sum()) if policy.sigma_low > 0 else 0
    return TierCounts(zero, low, len(sigmas) - zero - low)


def perturb_sequence(
    grads: Sequence[np.ndarray] | np.ndarray,
    annotated: AnnotatedSequence | Sequence[float] | np.ndarray,
    policy: NoisePolicy,
    rng: RngStream,
) -> tuple[np.ndarray, TierCounts]:
    """Clip each token gradient, noise those with sigma > 0, and sum.

    ``annotated`` supplies one noise multiplier per gradient, either as an
    ``AnnotatedSequence`` or as a plain array of sigmas.
    """
    sigmas = annotated.sigmas if isinstance(annotated, AnnotatedSequence) else np.asarray(annotated, dtype=np.float64)
    g = _stack(grads)
    if len(sigmas) != g.shape[0]:
        raise ValueError(f"{g.shape[0]} gradients but {len(sigmas)} noise multipliers")
    clipped, _ = clip_all(g, policy.clip_norm)
    total = np.zeros(clipped.shape[1])
    for i in range(clipped.shape[0]):
        gi = clipped[i]
        if sigmas[i] > 0:
            gi = noise(gi, float(sigmas[i]), policy.clip_norm, rng.split(i))
        total += gi
    return total, classify_tiers(sigmas, policy)


def perturb_uniform(
    grads: Sequence[np.ndarray] | np.ndarray,
    sigma: float,
    clip_norm: float,
    rng: RngStream,
) -> np.ndarray:
    """Standard DP-SGD aggregate: per-sample clip, sum, one Gaussian draw."""
    clipped, _ = clip_all(grads, clip_norm)
    total = np.zeros(clipped.shape[1])
    for row in clipped:
        total += row
    return noise(total, sigma, clip_norm, rng)
