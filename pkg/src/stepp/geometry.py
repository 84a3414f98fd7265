"""Distance machinery: squared-Euclidean norm, atomic weights, neighbor sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import ConfigError


@dataclass(frozen=True)
class NeighborSet:
    members: frozenset[str]
    defining_expression_size: int


def sq_norm(a, b) -> float:
    """Squared Euclidean distance between two points."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


def _check_c(c: float) -> None:
    if not (0.0 < c <= 1.0):
        raise ConfigError(f"atomic weight threshold must lie in (0, 1], got {c!r}")


def atomic_weight(a, b, c: float = 1.0) -> float:
    """Distance below the threshold ``c``, inverse distance above it.

    Coincident points get weight 1.  For ``c < 1`` the far branch is clamped
    at 1 so the weight never leaves [0, 1].
    """
    _check_c(c)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        return 1.0
    s = sq_norm(a, b)
    if s < c:
        return s
    return min(1.0, 1.0 / s)


def atomic_weights(sq: np.ndarray, c: float = 1.0, same: np.ndarray | None = None) -> np.ndarray:
    """Vectorized :func:`atomic_weight` on precomputed squared distances.

    ``same`` marks pairs whose positions are identical; by default a zero
    squared distance is taken to mean identical.
    """
    _check_c(c)
    sq = np.asarray(sq, dtype=float)
    if same is None:
        same = sq == 0.0
    with np.errstate(divide="ignore"):
        far = np.minimum(1.0, 1.0 / sq)
    w = np.where(sq < c, sq, far)
    return np.where(same, 1.0, w)


def pairwise_sq(Z: np.ndarray) -> np.ndarray:
    """All pairwise squared distances, computed coordinate-wise (no Gram trick)."""
    Z = np.asarray(Z, dtype=float)
    diff = Z[:, None, :] - Z[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def neighbor_mask(dist: np.ndarray, pool: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k-round argmin neighbor set within ``pool``.

    Each round removes every pool member tied at the current minimum, so the
    result is everything at or below the k-th smallest distinct distance.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    pool = np.asarray(pool, dtype=bool)
    if not pool.any():
        return pool.copy()
    levels = np.unique(dist[pool])
    cutoff = levels[min(k, len(levels)) - 1]
    return pool & (dist <= cutoff)


def neighbor_set(z, E: Mapping[str, object], k: int) -> NeighborSet:
    """Neighbor set of ``z`` in the defining expression ``E`` (id -> point)."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not E:
        return NeighborSet(frozenset(), 0)
    ids = list(E)
    z = np.asarray(z, dtype=float)
    pts = np.array([np.asarray(E[a], dtype=float) for a in ids])
    if pts.shape[1] != z.shape[0]:
        raise ValueError("dimension mismatch between ego and defining expression")
    diff = pts - z
    dist = np.einsum("ij,ij->i", diff, diff)
    mask = neighbor_mask(dist, np.ones(len(ids), dtype=bool), k)
    return NeighborSet(frozenset(a for a, keep in zip(ids, mask) if keep), len(ids))
