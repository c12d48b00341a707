"""Quaternion and rigid-pose algebra.

Quaternions are stored as ``(w, x, y, z)`` and multiplied with the Hamilton
convention. A :class:`RelativePose` maps canonical (first camera) coordinates
into the coordinates of another camera: ``x_cam = R(q) @ x + tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

_QUAT_EPS = 1e-12


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < _QUAT_EPS):
        raise InvalidParameterError("quaternion norm is (near) zero")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` for broadcastable ``(..., 4)`` arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _rotation_from_components(w, x, y, z):
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_to_rotation(q: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Rotation matrix of a unit quaternion; works on ``(..., 4)`` batches.

    Raises :class:`InvalidParameterError` when a quaternion is near zero or
    is off the unit sphere by more than ``atol``.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)
    if np.any(n < _QUAT_EPS):
        raise InvalidParameterError("quaternion norm is (near) zero")
    if np.any(np.abs(n - 1.0) > atol):
        raise InvalidParameterError(f"quaternion is not unit (norm {n.max():.6g})")
    w, x, y, z = np.moveaxis(q, -1, 0)
    return _rotation_from_components(w, x, y, z)


def rotation_vjp(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``R(q)`` back to the quaternion components.

    Uses the polynomial form of ``R`` (valid on the unit sphere), so the
    result still has to be projected through any normalization upstream.
    """
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = np.asarray(grad_r, dtype=np.float64)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - w * g12 + z * g20 + w * g21) - 4 * x * (g11 + g22)
    dy = 2 * (x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21) - 4 * y * (g00 + g22)
    dz = 2 * (-w * g01 + x * g02 + w * g10 + y * g12 + x * g20 + y * g21) - 4 * z * (g00 + g11)
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_vjp(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient through ``u = raw / |raw|`` along the last axis."""
    raw = np.asarray(raw, dtype=np.float64)
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    u = raw / n
    return (grad_unit - u * np.sum(u * grad_unit, axis=-1, keepdims=True)) / n


def quat_angle(q: np.ndarray) -> np.ndarray:
    """Rotation angle in radians of unit quaternion(s), in ``[0, pi]``."""
    q = quat_normalize(q)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def quat_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    a = quat_normalize(a)
    b = quat_normalize(b)
    d = float(np.dot(a, b))
    if d < 0.0:
        b, d = -b, -d
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    if d > 1.0 - 1e-12:
        return quat_normalize(a + t * (b - a))
    theta = np.arccos(min(d, 1.0))
    return (np.sin((1.0 - t) * theta) * a + np.sin(t * theta) * b) / np.sin(theta)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])


@dataclass(frozen=True)
class RelativePose:
    """Rigid transform from canonical coordinates into a camera frame.

    ``q`` is normalized on construction.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        tau = np.asarray(self.tau, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(tau))):
            raise InvalidParameterError("pose contains non-finite values")
        object.__setattr__(self, "q", quat_normalize(q))
        object.__setattr__(self, "tau", tau)

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls()

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center expressed in canonical coordinates."""
        return -self.rotation.T @ self.tau

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.tau

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.tau
        return m

    def is_identity(self) -> bool:
        return bool(np.all(self.tau == 0.0) and abs(self.q[0]) == 1.0)

    def __eq__(self, other):
        if not isinstance(other, RelativePose):
            return NotImplemented
        return bool(np.array_equal(self.q, other.q) and np.array_equal(self.tau, other.tau))

    def __hash__(self):
        return hash((self.q.tobytes(), self.tau.tobytes()))


def compose_pose(a: RelativePose, b: RelativePose) -> RelativePose:
    """``a`` after ``b``: ``x -> R_a (R_b x + tau_b) + tau_a``."""
    return RelativePose(quat_multiply(a.q, b.q), a.rotation @ b.tau + a.tau)


def invert_pose(a: RelativePose) -> RelativePose:
    return RelativePose(quat_conjugate(a.q), -(a.rotation.T @ a.tau))


def pose_slerp(a: RelativePose, b: RelativePose, t: float) -> RelativePose:
    """Slerp on rotation, linear blend on translation."""
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    return RelativePose(quat_slerp(a.q, b.q, t), (1.0 - t) * a.tau + t * b.tau)
