"""Rigid-body transforms, rotation helpers and the calibrated camera model.

Conventions
-----------
* Quaternions are stored scalar-last ``(x, y, z, w)`` and kept on the
  ``w >= 0`` hemisphere.
* ``T_AB`` maps points from frame B into frame A: ``p_A = R_AB p_B + t_AB``.
* Twists are ordered ``[rotation (rad), translation (m)]``.
* Pose increments are applied on the right: ``T <- T * exp(twist)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import NonPositiveDepth

_SMALL = 1e-8


def skew(v):
    """Cross-product matrix ``[v]x`` of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# --------------------------------------------------------------------------
# quaternions
# --------------------------------------------------------------------------


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., 3:4] < 0.0, -q, q)


def quat_mul(a, b):
    """Hamilton product ``a (x) b`` for scalar-last quaternions (broadcasts)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + bw * ax + ay * bz - az * by,
            aw * by + bw * ay + az * bx - ax * bz,
            aw * bz + bw * az + ax * by - ay * bx,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return np.concatenate([-q[..., :3], q[..., 3:4]], axis=-1)


def quat_left(q):
    """Matrix ``L(q)`` with ``q (x) p = L(q) p``."""
    v, w = q[:3], q[3]
    m = np.empty((4, 4))
    m[:3, :3] = w * np.eye(3) + skew(v)
    m[:3, 3] = v
    m[3, :3] = -v
    m[3, 3] = w
    return m


def quat_right(q):
    """Matrix ``R(q)`` with ``p (x) q = R(q) p``."""
    v, w = q[:3], q[3]
    m = np.empty((4, 4))
    m[:3, :3] = w * np.eye(3) - skew(v)
    m[:3, 3] = v
    m[3, :3] = -v
    m[3, 3] = w
    return m


def quat_to_rot(q):
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - z * w)
    out[..., 0, 2] = 2 * (x * z + y * w)
    out[..., 1, 0] = 2 * (x * y + z * w)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - x * w)
    out[..., 2, 0] = 2 * (x * z - y * w)
    out[..., 2, 1] = 2 * (y * z + x * w)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rot_to_quat(R):
    """Rotation matrix to a normalized ``w >= 0`` quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(np.array(q))


def rot_to_quat_batch(R):
    """Vectorized :func:`rot_to_quat` over a stack of ``(..., 3, 3)`` matrices."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    r00, r11, r22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    # 4x^2, 4y^2, 4z^2, 4w^2 candidates; the largest gives a stable divisor
    cand = np.stack([1 + r00 - r11 - r22, 1 - r00 + r11 - r22, 1 - r00 - r11 + r22, 1 + r00 + r11 + r22], axis=1)
    k = np.argmax(cand, axis=1)
    s = 2.0 * np.sqrt(np.maximum(cand[np.arange(len(R)), k], 1e-300))
    d21, d02, d10 = R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]
    s01, s02, s12 = R[:, 0, 1] + R[:, 1, 0], R[:, 0, 2] + R[:, 2, 0], R[:, 1, 2] + R[:, 2, 1]
    rows = np.stack([
        np.stack([0.25 * s, s01 / s, s02 / s, d21 / s], axis=1),
        np.stack([s01 / s, 0.25 * s, s12 / s, d02 / s], axis=1),
        np.stack([s02 / s, s12 / s, 0.25 * s, d10 / s], axis=1),
        np.stack([d21 / s, d02 / s, d10 / s, 0.25 * s], axis=1),
    ])
    q = rows[k, np.arange(len(R))]
    return quat_normalize(q).reshape(shape + (4,))


def quat_exp(phi):
    """Unit quaternion of the rotation vector ``phi``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([k * phi, np.cos(half)], axis=-1)


def quat_log(q):
    """Rotation vector of a unit quaternion, taking the shortest path."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., 3:4] < 0.0, -q, q)
    v = q[..., :3]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    w = q[..., 3:4]
    angle = 2.0 * np.arctan2(s, w)
    small = s < _SMALL
    k = np.where(small, 2.0 / np.where(small, w, 1.0), angle / np.where(small, 1.0, s))
    return k * v


# --------------------------------------------------------------------------
# SO(3)
# --------------------------------------------------------------------------


def so3_exp(phi):
    """Rodrigues formula; accepts a single 3-vector or an ``(..., 3)`` batch."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / (safe * safe))
    K = skew_batch(phi)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation vector of a rotation matrix (angle in ``[0, pi]``)."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-5:
        return 0.5 * w * (1.0 + theta * theta / 6.0)
    if math.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; go through the quaternion
        return quat_log(rot_to_quat(R))
    return theta / (2.0 * math.sin(theta)) * w


def right_jacobian(phi):
    """Right Jacobian of SO(3): ``Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)``.

    Accepts a single 3-vector or an ``(..., 3)`` batch.
    """
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / (safe * safe * safe))
    K = skew_batch(phi)
    return np.eye(3) - a * K + b * (K @ K)


def _se3_v(phi):
    theta2 = float(phi @ phi)
    K = skew(phi)
    if theta2 < 1e-10:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    theta = math.sqrt(theta2)
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta2 * K
        + (theta - math.sin(theta)) / (theta2 * theta) * (K @ K)
    )


# --------------------------------------------------------------------------
# SE(3)
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Se3Transform:
    """Rigid transform with a unit quaternion rotation and a translation in meters."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=float).reshape(4))
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        return cls(rot_to_quat(R), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(rot_to_quat(M[:3, :3]), M[:3, 3])

    @cached_property
    def R(self):
        return quat_to_rot(self.rotation)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        Rt = self.R.T
        return Se3Transform(quat_conj(self.rotation), -Rt @ self.translation)

    def compose(self, other):
        """``self * other``: apply ``other`` first, then ``self``."""
        q = quat_mul(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return Se3Transform(q, t)

    __matmul__ = compose

    def apply(self, points):
        """Transform a 3-vector or an ``(n, 3)`` array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def retract(self, twist):
        """``self * exp(twist)``."""
        return self.compose(se3_exp(twist))

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Se3Transform(q_xyzw={q}, t={t})"


def compose(a, b):
    return a.compose(b)


def inverse(T):
    return T.inverse()


def se3_exp(twist):
    """Exponential map of ``[rotation, translation]`` into :class:`Se3Transform`."""
    twist = np.asarray(twist, dtype=float)
    phi, u = twist[:3], twist[3:]
    return Se3Transform(quat_exp(phi), _se3_v(phi) @ u)


def se3_log(T):
    phi = quat_log(T.rotation)
    u = np.linalg.solve(_se3_v(phi), T.translation)
    return np.concatenate([phi, u])


def rotation_angle(T):
    return float(np.linalg.norm(quat_log(T.rotation)))


def rotation_minimal_error(q_est, q_ref):
    """Small-angle error ``2 vec(q_ref^-1 (x) q_est)``.

    The relative quaternion is taken on the ``w >= 0`` hemisphere, so ``q``
    and ``-q`` give the same (zero) error.
    """
    dq = quat_mul(quat_conj(np.asarray(q_ref, dtype=float)), np.asarray(q_est, dtype=float))
    sign = -1.0 if dq[3] < 0.0 else 1.0
    return 2.0 * sign * dq[:3]


def yaw_of(R):
    """Z-Y-X Euler yaw of a rotation matrix, radians."""
    return math.atan2(R[1, 0], R[0, 0])


def slerp(q0, q1, alpha):
    """Spherical interpolation, vectorised over ``alpha`` (and optionally q0/q1)."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    d = quat_mul(quat_conj(q0), q1)
    d = np.where(d[..., 3:4] < 0.0, -d, d)
    step = quat_exp(alpha[..., None] * quat_log(d))
    return quat_mul(q0, step)


# --------------------------------------------------------------------------
# camera
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with radial-tangential (k1, k2, p1, p2, k3) distortion."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    max_undistort_iterations = 20
    undistort_tolerance_px = 1e-10

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def distortion(self):
        return np.array([self.k1, self.k2, self.p1, self.p2, self.k3])

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def distort(self, xn):
        xn = np.asarray(xn, dtype=float)
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def distort_jacobian(self, xn):
        xn = np.asarray(xn, dtype=float)
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
        dradial = self.k1 + 2.0 * self.k2 * r2 + 3.0 * self.k3 * r2 * r2  # d radial / d r2
        J = np.empty(xn.shape[:-1] + (2, 2))
        J[..., 0, 0] = radial + 2.0 * x * x * dradial + 2.0 * self.p1 * y + 6.0 * self.p2 * x
        J[..., 0, 1] = 2.0 * x * y * dradial + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        J[..., 1, 0] = 2.0 * x * y * dradial + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        J[..., 1, 1] = radial + 2.0 * y * y * dradial + 6.0 * self.p1 * y + 2.0 * self.p2 * x
        return J

    def undistort(self, xd):
        """Invert :meth:`distort` by fixed-point iteration."""
        xd = np.asarray(xd, dtype=float)
        x = xd.copy()
        tol = self.undistort_tolerance_px / max(self.fx, self.fy)
        for _ in range(self.max_undistort_iterations):
            px, py = x[..., 0], x[..., 1]
            r2 = px * px + py * py
            radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
            dx = 2.0 * self.p1 * px * py + self.p2 * (r2 + 2.0 * px * px)
            dy = self.p1 * (r2 + 2.0 * py * py) + 2.0 * self.p2 * px * py
            new = np.stack([(xd[..., 0] - dx) / radial, (xd[..., 1] - dy) / radial], axis=-1)
            step = np.max(np.abs(new - x)) if new.size else 0.0
            x = new
            if step < tol:
                break
        return x

    def project_points(self, P):
        """Vectorised projection without raising.

        Returns ``(pixels, valid)`` where ``valid`` marks points with ``z > 0``.
        """
        P = np.asarray(P, dtype=float)
        z = P[..., 2]
        valid = z > 0.0
        zs = np.where(valid, z, 1.0)
        xn = P[..., :2] / zs[..., None]
        xd = self.distort(xn)
        uv = np.stack([self.fx * xd[..., 0] + self.cx, self.fy * xd[..., 1] + self.cy], axis=-1)
        return uv, valid

    def project(self, P):
        """Pixel coordinates of a camera-frame point (or ``(n, 3)`` points)."""
        P = np.asarray(P, dtype=float)
        if np.any(P[..., 2] <= 0.0):
            raise NonPositiveDepth("point at or behind the camera plane")
        return self.project_points(P)[0]

    def project_jacobian(self, P):
        """``d pixel / d P`` as ``(..., 2, 3)``."""
        P = np.asarray(P, dtype=float)
        X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
        iz = 1.0 / Z
        xn = np.stack([X * iz, Y * iz], axis=-1)
        Jd = self.distort_jacobian(xn)
        Jn = np.zeros(P.shape[:-1] + (2, 3))
        Jn[..., 0, 0] = iz
        Jn[..., 0, 2] = -X * iz * iz
        Jn[..., 1, 1] = iz
        Jn[..., 1, 2] = -Y * iz * iz
        F = np.array([[self.fx, 0.0], [0.0, self.fy]])
        return F @ Jd @ Jn

    def normalized(self, pixels):
        """Undistorted normalized image coordinates of pixels."""
        pixels = np.asarray(pixels, dtype=float)
        xd = np.stack(
            [(pixels[..., 0] - self.cx) / self.fx, (pixels[..., 1] - self.cy) / self.fy], axis=-1
        )
        return self.undistort(xd)

    def unproject(self, pixels, depth):
        """Back-project pixels to points whose z-component equals ``depth``."""
        depth = np.asarray(depth, dtype=float)
        if np.any(depth <= 0.0):
            raise NonPositiveDepth("unproject requires positive depth")
        xn = self.normalized(pixels)
        ones = np.ones(xn.shape[:-1] + (1,))
        return np.concatenate([xn, ones], axis=-1) * depth[..., None]

    @cached_property
    def pixel_rays(self):
        """``(height, width, 2)`` normalized coordinates of every integer pixel."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return self.normalized(np.stack([u, v], axis=-1).astype(float))

    def in_image(self, pixels, border=0.0):
        pixels = np.asarray(pixels, dtype=float)
        u, v = pixels[..., 0], pixels[..., 1]
        return (
            (u >= border)
            & (v >= border)
            & (u <= self.width - 1 - border)
            & (v <= self.height - 1 - border)
        )


@dataclass(frozen=True)
class CalibrationBundle:
    """Everything the estimator needs to know about the sensor rig."""

    event_camera: CameraModel
    standard_camera: CameraModel
    T_S_C0: Se3Transform
    T_S_C1: Se3Transform
    imu_time_offset: float = 0.0
    gyro_noise_density: float = 1e-3
    accel_noise_density: float = 1e-2
    gyro_random_walk: float = 1e-5
    accel_random_walk: float = 1e-4
    gravity_magnitude: float = 9.81

    def __post_init__(self):
        if not math.isfinite(self.imu_time_offset):
            raise ValueError("imu_time_offset must be finite")
        for name in (
            "gyro_noise_density",
            "accel_noise_density",
            "gyro_random_walk",
            "accel_random_walk",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def camera(self, sensor_id):
        return self.event_camera if sensor_id == 0 else self.standard_camera

    def T_S_C(self, sensor_id):
        return self.T_S_C0 if sensor_id == 0 else self.T_S_C1
