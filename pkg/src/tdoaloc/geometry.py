"""Rigid-body math and relative-pose (range-azimuth-elevation) features.

Conventions used throughout the package:

* Rotation matrices are world-from-body, i.e. ``v_world = R @ v_body``.
* ``skew`` follows the sign convention ``skew(w) @ c == cross(c, w)``;
  orientation kinematics are ``Cdot = C @ skew(omega)`` with ``omega`` the
  body-frame angular rate.
* Azimuth is measured from the body x-axis in the x-y plane, elevation from
  the x-y plane (positive up); both are computed with atan2 so azimuth lies
  in (-pi, pi] and elevation in [-pi/2, pi/2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GRAVITY = np.array([0.0, 0.0, -9.81])

_SMALL_ANGLE = 1e-10


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class Pose:
    """Rigid-body pose: position in meters plus world-from-body rotation."""

    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec3(self.position))
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {R.shape}")
        object.__setattr__(self, "rotation", R)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        ortho = np.max(np.abs(R.T @ R - np.eye(3)))
        return bool(ortho < tol and abs(np.linalg.det(R) - 1.0) < tol)


@dataclass(frozen=True)
class FeatureVector:
    """14-dimensional relative-pose feature for bias prediction.

    Layout (matching :meth:`as_array`): relative positions ``dp_i``/``dp_j``
    in the world frame, then the four azimuth angles (anchor i, anchor j,
    tag->i, tag->j), then the four elevation angles in the same order.
    """

    dp_i: np.ndarray
    dp_j: np.ndarray
    alpha: np.ndarray  # [alpha_Ai, alpha_Aj, alpha_Ti, alpha_Tj], rad
    beta: np.ndarray   # [beta_Ai, beta_Aj, beta_Ti, beta_Tj], rad

    def __post_init__(self):
        object.__setattr__(self, "dp_i", _as_vec3(self.dp_i))
        object.__setattr__(self, "dp_j", _as_vec3(self.dp_j))
        a = np.asarray(self.alpha, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if a.shape != (4,) or b.shape != (4,):
            raise ValueError("alpha and beta must each hold 4 angles")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def as_array(self) -> np.ndarray:
        """Flatten to the 14-vector [dp_i, dp_j, alpha, beta]."""
        return np.concatenate([self.dp_i, self.dp_j, self.alpha, self.beta])

    def dp_only(self) -> np.ndarray:
        """6-feature ablation input: relative positions without any angles."""
        return np.concatenate([self.dp_i, self.dp_j])


def skew(omega) -> np.ndarray:
    """Skew operator with the convention skew(w) @ c == cross(c, w)."""
    w = _as_vec3(omega)
    return np.array([
        [0.0, w[2], -w[1]],
        [-w[2], 0.0, w[0]],
        [w[1], -w[0], 0.0],
    ])


def rotation_exp(phi) -> np.ndarray:
    """Closed-form exponential of ``skew(phi)`` (Rodrigues' rotation).

    Falls back to the first-order expansion below the small-angle cutoff.
    """
    phi = _as_vec3(phi)
    angle = math.sqrt(phi @ phi)
    M = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + M + 0.5 * (M @ M)
    s = math.sin(angle) / angle
    c = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + s * M + c * (M @ M)


def integrate_orientation(R: np.ndarray, omega, dt: float) -> np.ndarray:
    """Propagate ``Cdot = C @ skew(omega)`` exactly over one step of dt."""
    if dt <= 0.0:
        raise ValueError("invalid step: dt must be positive")
    return np.asarray(R, dtype=float) @ rotation_exp(_as_vec3(omega) * dt)


def azimuth_elevation(observer: Pose, target) -> tuple[float, float]:
    """Bearing of ``target`` seen from ``observer``, in the observer body frame.

    Returns (azimuth, elevation) with azimuth in (-pi, pi] and elevation in
    [-pi/2, pi/2]. When the direction is exactly vertical the azimuth is
    defined as 0 so feature extraction stays deterministic.
    """
    target = _as_vec3(target)
    v = observer.rotation.T @ (target - observer.position)
    if not np.any(v):
        raise ValueError("degenerate direction: target coincides with observer")
    horiz = math.hypot(v[0], v[1])
    alpha = 0.0 if horiz == 0.0 else math.atan2(v[1], v[0])
    if alpha == -math.pi:
        alpha = math.pi
    beta = math.atan2(v[2], horiz)
    return alpha, beta


def extract_features(tag: Pose, anchor_i: Pose, anchor_j: Pose) -> FeatureVector:
    """Build the 14-dim bias-network input from tag and anchor poses."""
    dp_i = anchor_i.position - tag.position
    dp_j = anchor_j.position - tag.position
    a_ai, b_ai = azimuth_elevation(anchor_i, tag.position)
    a_aj, b_aj = azimuth_elevation(anchor_j, tag.position)
    a_ti, b_ti = azimuth_elevation(tag, anchor_i.position)
    a_tj, b_tj = azimuth_elevation(tag, anchor_j.position)
    return FeatureVector(
        dp_i=dp_i,
        dp_j=dp_j,
        alpha=np.array([a_ai, a_aj, a_ti, a_tj]),
        beta=np.array([b_ai, b_aj, b_ti, b_tj]),
    )


def yaw_rotation(yaw: float) -> np.ndarray:
    """World-from-body rotation for a body yawed by ``yaw`` about world z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def ypr_to_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """ZYX intrinsic Euler angles (radians) to world-from-body rotation."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return Rz @ Ry @ Rx


def rotation_to_ypr(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`ypr_to_rotation`; pitch is clamped at +-pi/2."""
    R = np.asarray(R, dtype=float)
    sp = -R[2, 0]
    sp = min(1.0, max(-1.0, sp))
    pitch = math.asin(sp)
    if abs(sp) > 1.0 - 1e-12:
        # Gimbal lock: roll is unobservable, fold it into yaw.
        yaw = math.atan2(-R[0, 1], R[1, 1])
        roll = 0.0
    else:
        yaw = math.atan2(R[1, 0], R[0, 0])
        roll = math.atan2(R[2, 1], R[2, 2])
    return yaw, pitch, roll


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion [w, x, y, z] (w >= 0)."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (R[2, 1] - R[1, 2]) / s,
            (R[0, 2] - R[2, 0]) / s,
            (R[1, 0] - R[0, 1]) / s,
        ])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(0.0, 1.0 + R[i, i] - R[j, j] - R[k, k])) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rotation(q) -> np.ndarray:
    """Unit quaternion [w, x, y, z] to rotation matrix."""
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError("quaternion must have 4 components")
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
