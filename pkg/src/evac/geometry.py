"""Planar angle arithmetic, circular means, and seeded RNG streams.

Angles are radians in the canonical interval (-pi, pi]. Circular means are
computed by vector summation: the mean of a set of angles is the argument of
the summed unit vectors, which is undefined when the resultant vector
vanishes (e.g. two opposite angles with equal weight). Undefined means are
reported as ``None`` and callers choose a fallback.

All randomness in the package flows through ``numpy.random.Generator``
instances backed by PCG64, created by :func:`make_rng` / :func:`spawn_rngs`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Resultant lengths at or below this count as "no prevailing direction".
ZERO_RESULTANT_EPS = 1e-12


def canonicalize_angle(theta: float) -> float:
    """Wrap an angle to the canonical interval (-pi, pi]."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    if -math.pi < theta <= math.pi:
        return theta
    return theta - TWO_PI * math.ceil((theta - math.pi) / TWO_PI)


def canonicalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`canonicalize_angle`."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    return theta - TWO_PI * np.ceil((theta - math.pi) / TWO_PI)


def _canonicalize_fast(theta: np.ndarray) -> np.ndarray:
    """canonicalize_angles without the finiteness check, for hot loops whose
    inputs are finite by construction. Same formula, same results."""
    return theta - TWO_PI * np.ceil((theta - math.pi) / TWO_PI)


def heading_vector(theta: float) -> np.ndarray:
    """Unit vector (cos theta, sin theta)."""
    return np.array([math.cos(theta), math.sin(theta)])


def heading_vectors(theta: np.ndarray) -> np.ndarray:
    """Unit vectors for an array of headings, shape (n, 2)."""
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def unit(v: np.ndarray) -> np.ndarray:
    """v / |v|. Raises ValueError on a zero vector."""
    v = np.asarray(v, dtype=np.float64)
    norm = math.hypot(float(v[0]), float(v[1]))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def circular_mean(angles: Sequence[float] | np.ndarray) -> float | None:
    """Circular mean of angles, or None when the resultant vanishes.

    Equivalent to the argument of ``sum(exp(1j * angles))``.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        raise ValueError("circular_mean of an empty set")
    s = float(np.sin(angles).sum())
    c = float(np.cos(angles).sum())
    if math.hypot(c, s) <= ZERO_RESULTANT_EPS:
        return None
    return canonicalize_angle(math.atan2(s, c))


def weighted_circular_mean(
    angles: Sequence[float] | np.ndarray,
    weights: Sequence[float] | np.ndarray,
) -> float | None:
    """Weighted circular mean, or None when the weighted resultant vanishes.

    Weights must be non-negative and not all zero. A zero weight removes its
    angle from the average exactly; scaling all weights by a positive constant
    leaves the result unchanged.
    """
    angles = np.asarray(angles, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if angles.size == 0:
        raise ValueError("weighted_circular_mean of an empty set")
    if angles.shape != weights.shape:
        raise ValueError(
            f"angles and weights must have the same shape, got {angles.shape} "
            f"!= {weights.shape}"
        )
    if np.any(weights < 0.0):
        raise ValueError("weights must be non-negative")
    if not np.any(weights > 0.0):
        raise ValueError("weights must not all be zero")
    s = float((weights * np.sin(angles)).sum())
    c = float((weights * np.cos(angles)).sum())
    if math.hypot(c, s) <= ZERO_RESULTANT_EPS:
        return None
    return canonicalize_angle(math.atan2(s, c))


def uniform_noise(rng: np.random.Generator, eta: float) -> float:
    """One draw from Uniform[-eta/2, eta/2]. eta must be >= 0; eta=0 gives 0."""
    if eta < 0.0:
        raise ValueError(f"noise amplitude must be >= 0, got {eta}")
    if eta == 0.0:
        return 0.0
    return float(rng.uniform(-0.5 * eta, 0.5 * eta))


def make_rng(seed: int | None = None) -> np.random.Generator:
    """A PCG64 generator. Same seed, same platform-independent stream."""
    return np.random.default_rng(seed)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n statistically independent child generators derived from one seed.

    Children are ordered and reproducible: spawn_rngs(s, n)[:k] equals
    spawn_rngs(s, k) stream-for-stream.
    """
    if n < 0:
        raise ValueError(f"cannot spawn {n} generators")
    return [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(n)]
