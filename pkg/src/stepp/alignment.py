"""Rigid Procrustes alignment of independently embedded waves."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import ModelError


class AlignmentError(ModelError):
    def __init__(self, message: str, wave: int | None = None):
        super().__init__(message if wave is None else f"wave {wave}: {message}")
        self.wave = wave


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``; the rotation may include a reflection."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    @classmethod
    def identity(cls, d: int) -> "RigidTransform":
        return cls(np.eye(d), np.zeros(d))


def residual(reference: Mapping[str, Sequence[float]], target: Mapping[str, Sequence[float]]) -> float:
    """Summed squared distance over shared ids."""
    shared = sorted(set(reference) & set(target))
    if not shared:
        return 0.0
    a = np.array([reference[i] for i in shared], dtype=float)
    b = np.array([target[i] for i in shared], dtype=float)
    return float(((a - b) ** 2).sum())


def procrustes_align(reference: Mapping[str, Sequence[float]], target: Mapping[str, Sequence[float]],
                     rank_tol: float = 1e-10):
    """Best rotation/reflection plus translation of ``target`` onto ``reference``.

    Fitted on the shared ids, then applied to every target id.  No scaling.
    Returns ``(transform, aligned_target)``.
    """
    shared = sorted(set(reference) & set(target))
    if not shared:
        raise AlignmentError("no shared actors with the reference")
    d = len(next(iter(reference.values())))
    if len(shared) < d + 1:
        raise AlignmentError(f"need at least {d + 1} shared actors, found {len(shared)}")
    A = np.array([reference[i] for i in shared], dtype=float)
    B = np.array([target[i] for i in shared], dtype=float)
    if B.shape[1] != d:
        raise AlignmentError(f"dimension mismatch: reference d={d}, target d={B.shape[1]}")
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ca, B - cb
    for name, X in (("reference", A0), ("target", B0)):
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[-1] <= rank_tol * max(sv[0], 1.0):
            raise AlignmentError(f"shared {name} points are degenerate (collinear/coplanar)")
    # maximize trace(R B0^T A0) over orthogonal R
    U, _, Vt = np.linalg.svd(A0.T @ B0)
    R = U @ Vt
    tf = RigidTransform(R, ca - R @ cb)
    ids = list(target)
    moved = tf.apply(np.array([target[i] for i in ids], dtype=float))
    return tf, {i: tuple(moved[j].tolist()) for j, i in enumerate(ids)}


def align_sequence(waves: Sequence[Mapping[str, Sequence[float]]],
                   reference: Mapping[str, Sequence[float]]) -> list[dict]:
    """Align each wave independently to a common reference."""
    out = []
    for w, wave in enumerate(waves):
        try:
            _, aligned = procrustes_align(reference, wave)
        except AlignmentError as e:
            raise AlignmentError(str(e), wave=w) from None
        out.append(aligned)
    return out
