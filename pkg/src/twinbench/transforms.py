"""Similarity transforms (scale + rotation + translation) and quaternion math.

Quaternions are stored as (w, x, y, z) and kept unit-norm. All angles are
radians unless a function name says degrees.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_UNIT_TOL = 1e-9


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m) -> np.ndarray:
    """Shepperd's method; numerically stable for all rotation matrices."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_rotate(q, points) -> np.ndarray:
    """Rotate one or many points by a unit quaternion."""
    return np.asarray(points, dtype=float) @ quat_to_matrix(q).T


def quat_geodesic_angle(a, b) -> float:
    """Rotation angle between two orientations, in radians, in [0, pi]."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * np.arccos(min(d, 1.0))


def quat_canonical(q) -> np.ndarray:
    """Fix the sign ambiguity: q and -q are the same rotation."""
    q = quat_normalize(q)
    for c in q:
        if c > 0:
            return q
        if c < 0:
            return -q
    return q


@dataclass(frozen=True)
class SimilarityTransform:
    """p_out = scale * R(rotation) @ p + translation."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        q = np.asarray(self.rotation, dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion is not unit-norm")
        object.__setattr__(self, "rotation", q / np.linalg.norm(q))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, scale: float, matrix, translation) -> "SimilarityTransform":
        return cls(scale=scale, rotation=quat_from_matrix(matrix), translation=translation)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.matrix.T) + self.translation

    def rotate_only(self, vectors) -> np.ndarray:
        """Rotate direction vectors (no scale, no translation)."""
        return np.asarray(vectors, dtype=float) @ self.matrix.T

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Returns T with T.apply(p) == self.apply(other.apply(p))."""
        return SimilarityTransform(
            scale=self.scale * other.scale,
            rotation=quat_normalize(quat_multiply(self.rotation, other.rotation)),
            translation=self.apply(other.translation),
        )

    def inverse(self) -> "SimilarityTransform":
        q_inv = quat_conjugate(self.rotation)
        s_inv = 1.0 / self.scale
        t_inv = -s_inv * quat_rotate(q_inv, self.translation)
        return SimilarityTransform(scale=s_inv, rotation=q_inv, translation=t_inv)

    def is_rigid(self, tol: float = 1e-9) -> bool:
        return abs(self.scale - 1.0) <= tol

    def almost_equal(self, other: "SimilarityTransform", tol: float = 1e-9) -> bool:
        return (
            abs(self.scale - other.scale) <= tol
            and quat_geodesic_angle(self.rotation, other.rotation) <= tol
            and float(np.max(np.abs(self.translation - other.translation))) <= tol
        )
