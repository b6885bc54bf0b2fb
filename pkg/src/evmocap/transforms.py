"""Quaternion and rigid-transform helpers.

Quaternions are wxyz, unit norm, canonicalized to w >= 0 where noted.
RigidTransform maps points from its source frame into its target frame:
T_CW takes world coordinates to camera coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    return q / n


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Fix the sign ambiguity: w >= 0 (w == 0 falls back to first nonzero > 0)."""
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c != 0:
            return q if c > 0 else -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to wxyz quaternion (canonical sign)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_canonical(quat_normalize(q))


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ quat_to_matrix(q).T


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of a unit quaternion, in radians, in [0, pi]."""
    w = abs(float(np.clip(q[0] / np.linalg.norm(q), -1.0, 1.0)))
    return 2.0 * float(np.arccos(w))


def quat_angle_between(a: np.ndarray, b: np.ndarray) -> float:
    return quat_angle(quat_multiply(quat_conjugate(a), b))


def quat_slerp(a: np.ndarray, b: np.ndarray, u: float) -> np.ndarray:
    a = quat_normalize(a)
    b = quat_normalize(b)
    dot = float(np.dot(a, b))
    if dot < 0:
        b, dot = -b, -dot
    if dot > 0.9999995:
        return quat_normalize(a + u * (b - a))
    th = np.arccos(np.clip(dot, -1, 1))
    return (np.sin((1 - u) * th) * a + np.sin(u * th) * b) / np.sin(th)


def quat_mean(qs: np.ndarray) -> np.ndarray:
    """Chordal mean of a set of quaternions (largest eigenvector of sum qq^T)."""
    qs = np.asarray(qs, dtype=np.float64)
    acc = qs.T @ qs  # qq^T accumulates sign-free over the double cover
    w, v = np.linalg.eigh(acc)
    return quat_canonical(quat_normalize(v[:, -1]))


def quats_to_matrices(qs: np.ndarray) -> np.ndarray:
    """Batched wxyz quaternions (n, 4) to rotation matrices (n, 3, 3)."""
    qs = np.asarray(qs, dtype=np.float64)
    qs = qs / np.linalg.norm(qs, axis=1, keepdims=True)
    w, x, y, z = qs[:, 0], qs[:, 1], qs[:, 2], qs[:, 3]
    m = np.empty((len(qs), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def slerp_many(q0: np.ndarray, q1: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise slerp between paired quaternions; u in [0, 1] per row."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64).copy()
    u = np.asarray(u, dtype=np.float64)[:, None]
    dot = np.sum(q0 * q1, axis=1)
    q1[dot < 0] *= -1
    dot = np.abs(dot)
    out = np.empty_like(q0)
    near = dot > 0.9999995
    if near.any():
        lerp = q0[near] + u[near] * (q1[near] - q0[near])
        out[near] = lerp / np.linalg.norm(lerp, axis=1, keepdims=True)
    far = ~near
    if far.any():
        th = np.arccos(np.clip(dot[far], -1, 1))[:, None]
        s = np.sin(th)
        out[far] = (np.sin((1 - u[far]) * th) * q0[far]
                    + np.sin(u[far] * th) * q1[far]) / s
    return out


@dataclass(frozen=True)
class RigidTransform:
    """p_target = R(q) @ p_source + t."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, np.float64)))
        object.__setattr__(self, "t", np.asarray(self.t, np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rot: np.ndarray, t: np.ndarray) -> "RigidTransform":
        return cls(matrix_to_quat(rot), t)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(
            quat_multiply(self.q, other.q),
            self.apply(other.t.reshape(1, 3))[0],
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        qi = quat_conjugate(self.q)
        return RigidTransform(qi, -quat_rotate(qi, self.t.reshape(1, 3))[0])
