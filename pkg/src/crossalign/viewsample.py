"""Greedy farthest-pose camera view selection in a 7-D (quaternion + translation) space."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def canonical_poses(poses) -> np.ndarray:
    """Flip each quaternion so its scalar part is non-negative.

    For w == 0 the first non-zero vector component is made positive, so q and
    -q always map to the same 7-vector.
    """
    P = np.array(poses, dtype=np.float64).reshape(-1, 7)
    q = P[:, :4]
    nz = q != 0
    first = np.where(nz.any(axis=1), nz.argmax(axis=1), 0)
    lead = q[np.arange(len(q)), first]
    P[:, :4] = np.where((lead < 0)[:, None], -q, q)
    return P


def farthest_pose_sample(poses, n: int, seed: int | None = 0, rotation_weight: float = 1.0,
                         start: int | None = None) -> list[int]:
    """Indices of ``min(n, len(poses))`` poses chosen by greedy max-min distance.

    The first pose is ``start`` if given, else drawn from ``seed``.  Ties go
    to the lowest index.
    """
    P = canonical_poses(poses)
    if len(P) == 0:
        raise InputError("farthest_pose_sample needs at least one pose")
    if n < 1:
        raise InputError("n must be >= 1")
    if not np.isfinite(P).all():
        raise InputError("poses must be finite")
    P[:, :4] *= rotation_weight
    if start is None:
        start = int(np.random.default_rng(seed).integers(len(P)))
    chosen = [int(start)]
    dist = np.linalg.norm(P - P[start], axis=1)
    dist[start] = -np.inf
    for _ in range(min(n, len(P)) - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(P - P[nxt], axis=1))
        dist[chosen] = -np.inf
    return chosen


def uniform_stride_sample(count: int, n: int) -> list[int]:
    """Evenly spaced frame indices, the simple key-frame fallback."""
    k = min(n, count)
    return sorted({int(i) for i in np.linspace(0, count - 1, k).round()})
