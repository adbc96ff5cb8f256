"""Ray and segment intersection against triangle soups.

Vectorized Moller-Trumbore over all triangles at once; adequate for the
mesh sizes this package handles (broad-phase pruning by AABB keeps the
candidate sets small in the hot paths).
"""
from __future__ import annotations

import numpy as np

_EPS = 1e-12


def ray_triangles(origin, direction, triangles, t_min=1e-9, t_max=np.inf):
    """Intersect one ray with many triangles.

    Args:
        origin: (3,) ray origin.
        direction: (3,) ray direction, need not be unit length.
        triangles: (m, 3, 3) corner coordinates.
        t_min: smallest admissible ray parameter (excludes the origin face).
        t_max: largest admissible ray parameter.

    Returns:
        (t, index): parameter and triangle index of the nearest hit, or
        (None, None) if nothing is hit.
    """
    hits_t, hits_i = _ray_hits(origin, direction, triangles, t_min, t_max)
    if len(hits_t) == 0:
        return None, None
    best = np.argmin(hits_t)
    return float(hits_t[best]), int(hits_i[best])


def ray_hits_any(origin, direction, triangles, t_min=1e-9, t_max=np.inf) -> bool:
    """True if the ray hits at least one triangle within (t_min, t_max)."""
    hits_t, _ = _ray_hits(origin, direction, triangles, t_min, t_max)
    return len(hits_t) > 0


def segment_hits_any(p0, p1, triangles, shrink=1e-9) -> bool:
    """True if the open segment p0..p1 crosses any triangle.

    ``shrink`` trims both endpoints (as ray-parameter margin) so segments
    that merely start or end on a surface do not count.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    return ray_hits_any(p0, p1 - p0, triangles, t_min=shrink, t_max=1.0 - shrink)


def _ray_hits(origin, direction, triangles, t_min, t_max):
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    tri = np.asarray(triangles, dtype=float)
    if tri.size == 0:
        return np.empty(0), np.empty(0, dtype=int)

    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > _EPS

    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - tri[:, 0]
    u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
    ok &= (u >= 0.0) & (u <= 1.0)

    qvec = np.cross(tvec, e1)
    v = np.einsum("j,ij->i", direction, qvec) * inv_det
    ok &= (v >= 0.0) & (u + v <= 1.0)

    t = np.einsum("ij,ij->i", e2, qvec) * inv_det
    ok &= (t > t_min) & (t < t_max)

    idx = np.nonzero(ok)[0]
    return t[idx], idx
