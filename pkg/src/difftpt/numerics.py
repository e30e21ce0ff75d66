"""Dense-vector kernels: normalization, cosine-softmax, entropy, fraction thresholds.

Vectors are plain 1-D float64 numpy arrays. Probability vectors are the same,
non-negative and summing to one.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .errors import EmptyInput, NonPositiveTemperature, ZeroNorm

NORM_FLOOR = 1e-12


class Direction(enum.Enum):
    KEEP_LOWEST = "lowest"
    KEEP_HIGHEST = "highest"


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"expected a nonempty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite values")
    return arr


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    norm = float(np.linalg.norm(v))
    if norm <= NORM_FLOOR:
        raise ZeroNorm(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def l2_normalize_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise version of :func:`l2_normalize` for (N, D) arrays."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise ZeroNorm("cannot normalize a row with (near) zero norm")
    return a / norms


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise ZeroNorm("cosine similarity undefined for a zero vector")
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def cosine_softmax(similarities, temperature: float) -> np.ndarray:
    """Softmax of ``similarities / temperature``; works along the last axis."""
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    s = np.asarray(similarities, dtype=np.float64)
    z = s / temperature
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def shannon_entropy(p) -> np.ndarray | float:
    """Natural-log entropy along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    h = -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)
    # tiny negative values can appear from rounding on one-hot inputs
    h = np.maximum(h, 0.0)
    if h.ndim == 0:
        return float(h)
    return h


def selection_count(n: int, fraction: float) -> int:
    """Number of items kept when keeping ``fraction`` of ``n``: ceil(fraction * n)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    # guard against 0.3 * 10 = 3.0000000000000004 style rounding
    k = math.ceil(round(fraction * n, 9))
    return max(1, min(n, k))


def fraction_threshold(values, fraction: float, direction: Direction) -> np.ndarray:
    """Boolean mask keeping the ceil(fraction*N) lowest or highest values.

    Ties are broken in favour of the lower index, so the result is fully
    determined by the input order.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 1 or vals.size == 0:
        raise EmptyInput("fraction_threshold needs a nonempty 1-D array")
    if not np.all(np.isfinite(vals)):
        raise ValueError("values must be finite")
    direction = Direction(direction)
    n = vals.size
    k = selection_count(n, fraction)
    key = vals if direction is Direction.KEEP_LOWEST else -vals
    # stable sort keeps lower indices first among equal keys
    order = np.argsort(key, kind="stable")
    keep = np.zeros(n, dtype=bool)
    keep[order[:k]] = True
    return keep
