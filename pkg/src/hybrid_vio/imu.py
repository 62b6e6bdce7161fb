"""IMU propagation, static initialisation and the inertial residual.

World frame is z-up with gravity ``(0, 0, -g)``. Integration uses the
midpoint (trapezoidal) rule between consecutive samples:

    R_{n+1} = R_n Exp((w_mid - b_g) dt)
    a_w     = 0.5 (R_n (a_n - b_a) + R_{n+1} (a_{n+1} - b_a)) + g
    p_{n+1} = p_n + v_n dt + 0.5 a_w dt^2
    v_{n+1} = v_n + a_w dt
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import GapTooLarge, NotStatic
from .geometry import (
    Se3Transform,
    quat_conj,
    quat_left,
    quat_mul,
    quat_right,
    quat_to_rot,
    rot_to_quat,
    rot_to_quat_batch,
    right_jacobian,
    rotation_minimal_error,
    skew,
    skew_batch,
    slerp,
    so3_exp,
)

DEFAULT_MAX_GAP = 0.010
BIAS_REPROPAGATE_THRESHOLD = 0.01  # rad/s of gyro-bias change


def gravity_vector(magnitude=9.81):
    return np.array([0.0, 0.0, -float(magnitude)])


@dataclass
class SensorState:
    """Pose, velocity and IMU biases at one timestamp."""

    t: float
    T_WS: Se3Transform = field(default_factory=Se3Transform.identity)
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).reshape(3).copy()
        self.bg = np.asarray(self.bg, dtype=float).reshape(3).copy()
        self.ba = np.asarray(self.ba, dtype=float).reshape(3).copy()

    def copy(self):
        return replace(self)

    def retract(self, delta):
        """Apply a 15-dim increment ``[dtheta, drho, dv, dbg, dba]``."""
        delta = np.asarray(delta, dtype=float)
        return SensorState(
            self.t,
            self.T_WS.retract(delta[:6]),
            self.v + delta[6:9],
            self.bg + delta[9:12],
            self.ba + delta[12:15],
        )

    def is_finite(self):
        return bool(
            np.all(np.isfinite(self.T_WS.rotation))
            and np.all(np.isfinite(self.T_WS.translation))
            and np.all(np.isfinite(self.v))
            and np.all(np.isfinite(self.bg))
            and np.all(np.isfinite(self.ba))
        )


@dataclass
class ImuSegment:
    """IMU samples covering ``[t[0], t[-1]]`` exactly (ends interpolated)."""

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    @property
    def t0(self):
        return float(self.t[0])

    @property
    def t1(self):
        return float(self.t[-1])

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0])


def _interp(imu, t):
    i = int(np.searchsorted(imu.t, t, side="right"))
    i = min(max(i, 1), len(imu.t) - 1)
    t0, t1 = imu.t[i - 1], imu.t[i]
    w = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
    w = min(max(w, 0.0), 1.0)
    return (1 - w) * imu.accel[i - 1] + w * imu.accel[i], (1 - w) * imu.gyro[i - 1] + w * imu.gyro[i]


def imu_segment(imu, t0, t1, max_gap=DEFAULT_MAX_GAP):
    """Cut ``[t0, t1]`` out of an IMU stream, interpolating the end samples."""
    if t1 < t0:
        raise ValueError("segment end precedes start")
    if len(imu.t) == 0:
        raise GapTooLarge("no IMU data")
    if imu.t[0] - t0 > max_gap or t1 - imu.t[-1] > max_gap:
        raise GapTooLarge(f"IMU data does not cover [{t0:.6f}, {t1:.6f}]")
    lo = int(np.searchsorted(imu.t, t0, side="right"))
    hi = int(np.searchsorted(imu.t, t1, side="left"))
    inner = slice(lo, hi)
    a0, g0 = _interp(imu, t0)
    if t1 == t0:
        return ImuSegment(np.array([t0]), a0[None], g0[None])
    a1, g1 = _interp(imu, t1)
    t = np.concatenate([[t0], imu.t[inner], [t1]])
    accel = np.vstack([a0, imu.accel[inner], a1])
    gyro = np.vstack([g0, imu.gyro[inner], g1])
    keep = np.concatenate([[True], np.diff(t) > 0])
    t, accel, gyro = t[keep], accel[keep], gyro[keep]
    if len(t) > 1 and np.max(np.diff(t)) > max_gap + 1e-12:
        raise GapTooLarge(f"IMU gap of {np.max(np.diff(t)) * 1e3:.1f} ms in [{t0:.6f}, {t1:.6f}]")
    return ImuSegment(t, accel, gyro)


def static_initialize(seg, gravity_magnitude=9.81, gyro_std_gate=0.1, accel_std_gate=1.0):
    """Attitude (roll, pitch) and biases from a static IMU segment.

    Yaw is unobservable and set to zero; position is the origin and the
    velocity zero.
    """
    gyro_std = float(np.std(np.linalg.norm(seg.gyro, axis=1)))
    accel_std = float(np.std(np.linalg.norm(seg.accel, axis=1)))
    if gyro_std > gyro_std_gate or accel_std > accel_std_gate:
        raise NotStatic(f"sensor not static (gyro std {gyro_std:.3f} rad/s, accel std {accel_std:.3f} m/s^2)")
    f = seg.accel.mean(axis=0)
    roll = math.atan2(f[1], f[2])
    pitch = math.atan2(-f[0], math.hypot(f[1], f[2]))
    R = so3_exp([0.0, pitch, 0.0]) @ so3_exp([roll, 0.0, 0.0])
    bg = seg.gyro.mean(axis=0)
    ba = f - R.T @ np.array([0.0, 0.0, gravity_magnitude])
    return SensorState(seg.t1, Se3Transform.from_rt(R, np.zeros(3)), np.zeros(3), bg, ba)


@numba.njit(cache=True)
def _midpoint_kernel(R, p, v, acc, t, E_all, g, Rs, ps):
    """Midpoint integration loop; fills ``Rs``/``ps`` and returns ``(R, p, v)``."""
    Rs[0] = R
    ps[0] = p
    for n in range(len(t) - 1):
        dt = t[n + 1] - t[n]
        R_next = R @ E_all[n]
        a_w = 0.5 * (R @ acc[n] + R_next @ acc[n + 1]) + g
        p = p + v * dt + 0.5 * a_w * dt * dt
        v = v + a_w * dt
        R = R_next
        Rs[n + 1] = R
        ps[n + 1] = p
    return R, p, v


def propagate(state, seg, gravity_magnitude=9.81, return_poses=False):
    """Propagate ``state`` through ``seg`` with biases held constant."""
    if abs(seg.t0 - state.t) > 1e-9:
        raise ValueError(f"segment starts at {seg.t0} but state is at {state.t}")
    g = gravity_vector(gravity_magnitude)
    acc = np.ascontiguousarray(seg.accel - state.ba, dtype=float)
    gyr = seg.gyro - state.bg
    t = np.ascontiguousarray(seg.t, dtype=float)
    if len(t) > 1:
        E_all = so3_exp(0.5 * (gyr[:-1] + gyr[1:]) * np.diff(t)[:, None])
    else:
        E_all = np.zeros((0, 3, 3))
    Rs = np.empty((len(t), 3, 3))
    ps = np.empty((len(t), 3))
    R, p, v = _midpoint_kernel(
        np.ascontiguousarray(state.T_WS.R, dtype=float),
        np.array(state.T_WS.translation, dtype=float),
        np.array(state.v, dtype=float),
        acc, t, np.ascontiguousarray(E_all), g, Rs, ps,
    )
    out = SensorState(seg.t1, Se3Transform.from_rt(R, p), v, state.bg, state.ba)
    if return_poses:
        return out, Rs, ps
    return out


class PoseTrack:
    """IMU-propagated sensor poses, queryable at arbitrary times.

    Built once per event window from an anchor state; queries interpolate
    linearly in position and spherically in rotation between IMU samples.
    """

    def __init__(self, anchor, imu, t_end, gravity_magnitude=9.81, max_gap=DEFAULT_MAX_GAP):
        seg = imu_segment(imu, anchor.t, t_end, max_gap)
        self.end_state, self.R, self.p = propagate(anchor, seg, gravity_magnitude, return_poses=True)
        self.t = seg.t
        self.q = rot_to_quat_batch(self.R)

    @property
    def t0(self):
        return float(self.t[0])

    @property
    def t1(self):
        return float(self.t[-1])

    def query(self, times):
        """Rotation matrices ``(n, 3, 3)`` and positions ``(n, 3)`` of ``T_WS(times)``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if len(self.t) == 1:
            return np.repeat(self.R[:1], len(times), axis=0), np.repeat(self.p[:1], len(times), axis=0)
        i = np.clip(np.searchsorted(self.t, times, side="right"), 1, len(self.t) - 1)
        t0, t1 = self.t[i - 1], self.t[i]
        w = np.clip((times - t0) / np.maximum(t1 - t0, 1e-15), 0.0, 1.0)
        p = (1 - w)[:, None] * self.p[i - 1] + w[:, None] * self.p[i]
        q = slerp(self.q[i - 1], self.q[i], w)
        return quat_to_rot(q), p

    def pose_at(self, t):
        R, p = self.query([t])
        return Se3Transform.from_rt(R[0], p[0])

    def incremental_transform(self, t_l, t_m, T_S_C):
        """``T_{t_l, t_m}`` of the camera with extrinsics ``T_S_C``."""
        return incremental_transform(self.pose_at(t_l), self.pose_at(t_m), T_S_C)


def incremental_transform(T_WS_l, T_WS_m, T_S_C):
    """``(T_WS(t_l) T_SC)^-1 (T_WS(t_m) T_SC)``: maps camera points at t_m into the camera at t_l."""
    return (T_WS_l @ T_S_C).inverse() @ (T_WS_m @ T_S_C)


# --------------------------------------------------------------------------
# inertial residual
# --------------------------------------------------------------------------


class Preintegration:
    """Segment integrated relative to the start attitude at fixed biases.

    Holds ``dR``, ``alpha`` (position) and ``beta`` (velocity) such that the
    midpoint propagation of a state ``(R, p, v)`` gives

        R_pred = R dR
        p_pred = p + v T + 0.5 g T^2 + R alpha
        v_pred = v + g T + R beta

    together with exact first derivatives of the discrete scheme with
    respect to the biases and the first-order noise covariance of
    ``[alpha, theta, beta]``.
    """

    def __init__(self, seg, bg, ba, gyro_noise=0.0, accel_noise=0.0):
        self.seg = seg
        self.bg = np.asarray(bg, dtype=float).copy()
        self.ba = np.asarray(ba, dtype=float).copy()
        self.T = seg.duration
        self._integrate(gyro_noise, accel_noise)

    def _integrate(self, sg, sa):
        t = self.seg.t
        acc = self.seg.accel - self.ba
        gyr = self.seg.gyro - self.bg
        dR = np.eye(3)
        alpha = np.zeros(3)
        beta = np.zeros(3)
        JR = np.zeros((3, 3))
        Ja_g = np.zeros((3, 3))
        Ja_a = np.zeros((3, 3))
        Jb_g = np.zeros((3, 3))
        Jb_a = np.zeros((3, 3))
        cov = np.zeros((9, 9))
        I3 = np.eye(3)
        dts = np.diff(t)
        phis = 0.5 * (gyr[:-1] + gyr[1:]) * dts[:, None]
        E_all = so3_exp(phis)
        Jr_all = right_jacobian(phis)
        S_all = skew_batch(acc)
        for n in range(len(t) - 1):
            dt = dts[n]
            E = E_all[n]
            Jr = Jr_all[n]
            dR_next = dR @ E
            JR_next = E.T @ JR - Jr * dt
            f = 0.5 * (dR @ acc[n] + dR_next @ acc[n + 1])
            df_g = -0.5 * (dR @ S_all[n] @ JR + dR_next @ S_all[n + 1] @ JR_next)
            df_a = -0.5 * (dR + dR_next)

            if sg > 0 or sa > 0:
                A = np.eye(9)
                ax = dR @ S_all[n]
                A[0:3, 3:6] = -0.5 * ax * dt * dt
                A[0:3, 6:9] = I3 * dt
                A[3:6, 3:6] = E.T
                A[6:9, 3:6] = -ax * dt
                Bg = np.zeros((9, 3))
                Bg[3:6] = Jr * dt
                Ba = np.zeros((9, 3))
                Ba[0:3] = 0.5 * dR * dt * dt
                Ba[6:9] = dR * dt
                cov = A @ cov @ A.T + (sg * sg / dt) * Bg @ Bg.T + (sa * sa / dt) * Ba @ Ba.T

            alpha = alpha + beta * dt + 0.5 * f * dt * dt
            Ja_g = Ja_g + Jb_g * dt + 0.5 * df_g * dt * dt
            Ja_a = Ja_a + Jb_a * dt + 0.5 * df_a * dt * dt
            beta = beta + f * dt
            Jb_g = Jb_g + df_g * dt
            Jb_a = Jb_a + df_a * dt
            dR = dR_next
            JR = JR_next
        self.dR = dR
        self.alpha = alpha
        self.beta = beta
        self.J_R_bg = JR
        self.J_alpha_bg = Ja_g
        self.J_alpha_ba = Ja_a
        self.J_beta_bg = Jb_g
        self.J_beta_ba = Jb_a
        self.cov = cov

    def corrected(self, bg, ba):
        """First-order bias-corrected ``(dR, alpha, beta)``."""
        dbg = np.asarray(bg) - self.bg
        dba = np.asarray(ba) - self.ba
        dR = self.dR @ so3_exp(self.J_R_bg @ dbg)
        alpha = self.alpha + self.J_alpha_bg @ dbg + self.J_alpha_ba @ dba
        beta = self.beta + self.J_beta_bg @ dbg + self.J_beta_ba @ dba
        return dR, alpha, beta


def residual_covariance(pre, R_a, gyro_walk, accel_walk, floor=1e-12):
    """15x15 covariance of ``[p, theta, v, bg, ba]`` residual blocks."""
    rot = np.zeros((9, 9))
    rot[0:3, 0:3] = R_a
    rot[3:6, 3:6] = np.eye(3)
    rot[6:9, 6:9] = R_a
    cov = np.zeros((15, 15))
    cov[:9, :9] = rot @ pre.cov @ rot.T
    cov[9:12, 9:12] = np.eye(3) * gyro_walk**2 * pre.T
    cov[12:15, 12:15] = np.eye(3) * accel_walk**2 * pre.T
    cov += np.eye(15) * floor
    return cov


def inertial_error(pre, state_a, state_b, gravity_magnitude=9.81, with_jacobians=True):
    """Prediction-minus-state residual and Jacobians w.r.t. both 15-dim tangents.

    Residual blocks are ``[position, rotation, velocity, gyro bias, accel bias]``;
    tangents are ``[dtheta, drho, dv, dbg, dba]`` with the pose perturbed on
    the right through the SE(3) exponential.
    """
    g = gravity_vector(gravity_magnitude)
    T = pre.T
    R_a = state_a.T_WS.R
    p_a = state_a.T_WS.translation
    R_b = state_b.T_WS.R
    p_b = state_b.T_WS.translation
    dR, alpha, beta = pre.corrected(state_a.bg, state_a.ba)
    q_pred = quat_mul(state_a.T_WS.rotation, rot_to_quat(dR))

    p_pred = p_a + state_a.v * T + 0.5 * g * T * T + R_a @ alpha
    v_pred = state_a.v + g * T + R_a @ beta
    e = np.empty(15)
    e[0:3] = p_pred - p_b
    e[3:6] = rotation_minimal_error(q_pred, state_b.T_WS.rotation)
    e[6:9] = v_pred - state_b.v
    e[9:12] = state_a.bg - state_b.bg
    e[12:15] = state_a.ba - state_b.ba
    if not with_jacobians:
        return e

    q_err = quat_mul(quat_conj(state_b.T_WS.rotation), q_pred)
    sign = -1.0 if q_err[3] < 0 else 1.0
    Lq = sign * quat_left(q_err)[:3, :3]
    Rq = sign * quat_right(q_err)[:3, :3]
    dbg = state_a.bg - pre.bg
    # dR(bg) = dR0 Exp(J dbg): chain through the right Jacobian of the correction
    JR_bg = right_jacobian(pre.J_R_bg @ dbg) @ pre.J_R_bg

    Ja = np.zeros((15, 15))
    Jb = np.zeros((15, 15))
    # position
    Ja[0:3, 0:3] = -R_a @ skew(alpha)
    Ja[0:3, 3:6] = R_a
    Ja[0:3, 6:9] = np.eye(3) * T
    Ja[0:3, 9:12] = R_a @ pre.J_alpha_bg
    Ja[0:3, 12:15] = R_a @ pre.J_alpha_ba
    Jb[0:3, 3:6] = -R_b
    # rotation
    Ja[3:6, 0:3] = Lq @ dR.T
    Ja[3:6, 9:12] = Lq @ JR_bg
    Jb[3:6, 0:3] = -Rq
    # velocity
    Ja[6:9, 0:3] = -R_a @ skew(beta)
    Ja[6:9, 6:9] = np.eye(3)
    Ja[6:9, 9:12] = R_a @ pre.J_beta_bg
    Ja[6:9, 12:15] = R_a @ pre.J_beta_ba
    Jb[6:9, 6:9] = -np.eye(3)
    # biases
    Ja[9:12, 9:12] = np.eye(3)
    Jb[9:12, 9:12] = -np.eye(3)
    Ja[12:15, 12:15] = np.eye(3)
    Jb[12:15, 12:15] = -np.eye(3)
    return e, Ja, Jb


def imu_residual(state_k, state_k1, seg, calib):
    """Inertial residual between two states and its information matrix.

    The prediction is the literal propagation of ``state_k`` through
    ``seg``; the information is the inverse of the first-order propagated
    noise covariance plus bias random-walk blocks.
    """
    pre = Preintegration(seg, state_k.bg, state_k.ba, calib.gyro_noise_density, calib.accel_noise_density)
    e = inertial_error(pre, state_k, state_k1, calib.gravity_magnitude, with_jacobians=False)
    cov = residual_covariance(pre, state_k.T_WS.R, calib.gyro_random_walk, calib.accel_random_walk)
    return e, np.linalg.inv(cov)


def literal_imu_error(state_k, state_k1, seg, gravity_magnitude=9.81):
    """Residual computed by straight propagation (used as an independent check)."""
    pred = propagate(state_k, seg, gravity_magnitude)
    e = np.empty(15)
    e[0:3] = pred.T_WS.translation - state_k1.T_WS.translation
    e[3:6] = rotation_minimal_error(pred.T_WS.rotation, state_k1.T_WS.rotation)
    e[6:9] = pred.v - state_k1.v
    e[9:12] = state_k.bg - state_k1.bg
    e[12:15] = state_k.ba - state_k1.ba
    return e
