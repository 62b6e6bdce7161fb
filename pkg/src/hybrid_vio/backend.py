"""Sliding-window visual-inertial optimisation.

The window holds the ``M`` most recent keyframes and the ``K`` most recent
frames. Its cost couples reprojection errors of both sensors' landmarks,
inertial errors between consecutive window frames and, when the scene is
almost still, a zero-velocity prior on the newest frame. States leaving
the window are frozen as they are (no marginalisation prior).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import BehindCamera, NumericalFailure, WindowTooSmall
from .imu import (
    BIAS_REPROPAGATE_THRESHOLD,
    Preintegration,
    SensorState,
    imu_segment,
    inertial_error,
    residual_covariance,
)

STATE_DIM = 15
POSE_DIM = 6


@dataclass
class BackendParams:
    window_k: int = 3
    window_m: int = 5
    lm_max_iterations: int = 10
    lm_initial_lambda: float = 1e-10
    relative_cost_tolerance: float = 1e-6
    step_tolerance: float = 1e-8
    huber_scale_px: Optional[float] = 1.5
    sigma_px_event: float = 1.5
    sigma_px_frame: float = 1.0
    sigma_zero_velocity: float = 0.01

    def __post_init__(self):
        if self.window_k < 1 or self.window_m < 1:
            raise ValueError("window sizes must be positive")
        if self.huber_scale_px is not None and self.huber_scale_px <= 0:
            raise ValueError("huber scale must be positive")
        if min(self.sigma_px_event, self.sigma_px_frame, self.sigma_zero_velocity) <= 0:
            raise ValueError("noise sigmas must be positive")

    def sigma_px(self, sensor_id):
        return self.sigma_px_event if sensor_id == 0 else self.sigma_px_frame


# --------------------------------------------------------------------------
# residuals
# --------------------------------------------------------------------------


def _reprojection_batch(R_WS, p_WS, T_S_C, cam, landmarks, pixels):
    """Residuals ``z - pi(T_CS T_SW l)`` with Jacobians, vectorised.

    ``R_WS (n,3,3)``, ``p_WS (n,3)``, ``landmarks (n,3)``, ``pixels (n,2)``.
    Returns ``(e (n,2), J_pose (n,2,6), J_l (n,2,3), depth (n,))``; the pose
    Jacobian is w.r.t. the right-perturbation tangent ``[dtheta, drho]``.
    """
    R_CS = T_S_C.R.T
    t_CS = -R_CS @ T_S_C.translation
    P_S = np.einsum("nji,nj->ni", R_WS, landmarks - p_WS)
    P_C = P_S @ R_CS.T + t_CS
    uv, valid = cam.project_points(P_C)
    e = pixels - uv
    Jpi = cam.project_jacobian(np.where(valid[:, None], P_C, [0.0, 0.0, 1.0]))
    A = -Jpi @ R_CS  # de/dP_S
    n = len(P_S)
    skewP = np.zeros((n, 3, 3))
    skewP[:, 0, 1], skewP[:, 0, 2] = -P_S[:, 2], P_S[:, 1]
    skewP[:, 1, 0], skewP[:, 1, 2] = P_S[:, 2], -P_S[:, 0]
    skewP[:, 2, 0], skewP[:, 2, 1] = -P_S[:, 1], P_S[:, 0]
    J_pose = np.concatenate([A @ skewP, -A], axis=2)
    J_l = np.einsum("nij,nkj->nik", A, R_WS)
    return e, J_pose, J_l, P_C[:, 2]


def reprojection_residual(state, T_S_C, cam, landmark, pixel):
    """Reprojection error of one observation.

    Returns ``(e, J_state (2,15), J_landmark (2,3))`` with
    ``e = z - pi(T_CS T_SW l)`` in pixels.
    """
    e, Jp, Jl, depth = _reprojection_batch(
        state.T_WS.R[None], state.T_WS.translation[None], T_S_C, cam,
        np.asarray(landmark, float)[None], np.asarray(pixel, float)[None],
    )
    if depth[0] <= 0:
        raise BehindCamera("landmark behind the camera")
    J = np.zeros((2, STATE_DIM))
    J[:, :POSE_DIM] = Jp[0]
    return e[0], J, Jl[0]


def zero_velocity_prior(state, sigma=0.01):
    """Residual ``v_W`` with information ``sigma^-2 I``."""
    return state.v.copy(), np.eye(3) / sigma**2


def zero_velocity_jacobian(state=None):
    """``d v_W / d tangent``; constant because velocity retracts additively."""
    J = np.zeros((3, STATE_DIM))
    J[:, 6:9] = np.eye(3)
    return J


def huber_weight(norm, scale):
    """IRLS weight and robust cost ``rho(norm)`` for squared-norm inputs."""
    if scale is None:
        return np.ones_like(norm), norm**2
    w = np.where(norm <= scale, 1.0, scale / np.maximum(norm, 1e-300))
    rho = np.where(norm <= scale, norm**2, 2 * scale * norm - scale**2)
    return w, rho


# --------------------------------------------------------------------------
# window bookkeeping
# --------------------------------------------------------------------------


@dataclass
class FrameRecord:
    index: int
    state: SensorState
    is_keyframe: bool = False
    observations: dict = field(default_factory=dict)  # (sensor, track) -> pixel
    zero_velocity: bool = False  # no-motion gate fired at this frame

    @property
    def t(self):
        return self.state.t


class OptimizationWindow:
    """Frames under optimisation plus the landmarks they observe."""

    def __init__(self, params=None):
        self.params = params or BackendParams()
        self.frames = []
        self.landmarks = {}  # (sensor, id) -> position
        self.retired = set()
        self.frozen = []  # states dropped from the window, oldest first
        self._preint = {}

    def __len__(self):
        return len(self.frames)

    @property
    def keyframes(self):
        return [f for f in self.frames if f.is_keyframe]

    def add_landmark(self, key, position):
        if key in self.retired:
            return False
        self.landmarks[key] = np.asarray(position, dtype=float).copy()
        return True

    def observation_counts(self):
        counts = {}
        for f in self.frames:
            for key in f.observations:
                if key in self.landmarks:
                    counts[key] = counts.get(key, 0) + 1
        return counts

    def retire_unobserved(self, dead_tracks=()):
        """Retire landmarks with no in-window observation, or fewer than two on a dead track."""
        counts = self.observation_counts()
        dead = set(dead_tracks)
        gone = [k for k in self.landmarks if counts.get(k, 0) == 0 or (k in dead and counts.get(k, 0) < 2)]
        for k in gone:
            del self.landmarks[k]
            self.retired.add(k)
        return gone

    def preintegration(self, a, b, imu, calib):
        """Cached preintegration between two window frames, refreshed when gyro bias moves."""
        key = (a.t, b.t)
        pre = self._preint.get(key)
        if pre is not None and np.max(np.abs(a.state.bg - pre.bg)) <= BIAS_REPROPAGATE_THRESHOLD:
            return pre
        seg = imu_segment(imu, a.t, b.t)
        pre = Preintegration(seg, a.state.bg, a.state.ba, calib.gyro_noise_density, calib.accel_noise_density)
        self._preint[key] = pre
        return pre

    def prune_cache(self):
        times = {f.t for f in self.frames}
        self._preint = {k: v for k, v in self._preint.items() if k[0] in times and k[1] in times}


def manage_window(window, frame, is_keyframe, dead_tracks=()):
    """Append ``frame`` and enforce the ``K`` recent / ``M`` keyframe bounds.

    Returns the dropped frame records (their states are frozen).
    """
    p = window.params
    frame.is_keyframe = bool(is_keyframe)
    window.frames.append(frame)
    dropped = []
    while True:
        non_kf = [f for f in window.frames if not f.is_keyframe]
        kfs = [f for f in window.frames if f.is_keyframe]
        if len(non_kf) > p.window_k:
            victim = non_kf[0]
        elif len(kfs) > p.window_m:
            victim = kfs[0]
        else:
            break
        window.frames.remove(victim)
        dropped.append(victim)
        window.frozen.append(victim.state.copy())
    window.retire_unobserved(dead_tracks)
    window.prune_cache()
    return dropped


# --------------------------------------------------------------------------
# problem
# --------------------------------------------------------------------------


@dataclass
class InertialTerm:
    a: int
    b: int
    pre: Preintegration
    sqrt_info: np.ndarray  # upper factor: sqrt_info.T @ sqrt_info = information
    gravity: float


@dataclass
class Problem:
    states: list
    fixed_pose: set
    landmark_keys: list
    landmarks: np.ndarray  # (L, 3)
    obs_state: np.ndarray
    obs_landmark: np.ndarray
    obs_sensor: np.ndarray
    obs_pixel: np.ndarray
    obs_sigma: np.ndarray
    inertial: list
    zero_velocity: list  # [(state index, sigma)]
    extrinsics: dict  # sensor -> T_S_C
    cameras: dict  # sensor -> CameraModel
    huber: Optional[float] = None

    @property
    def n_states(self):
        return len(self.states)

    def count(self, sensor=None):
        if sensor is None:
            return len(self.obs_state)
        return int(np.sum(self.obs_sensor == sensor))


def build_problem(window, calib, imu, sensors=(0, 1), zero_velocity=False, params=None):
    """Assemble residual blocks for the current window contents."""
    params = params or window.params
    if len(window.frames) < 2:
        raise WindowTooSmall("optimisation needs at least two frames")
    frames = sorted(window.frames, key=lambda f: f.t)
    states = [f.state for f in frames]
    kf_idx = [i for i, f in enumerate(frames) if f.is_keyframe]
    fixed = {kf_idx[0] if kf_idx else 0}

    counts = {}
    for f in frames:
        for key in f.observations:
            if key[0] in sensors and key in window.landmarks:
                counts[key] = counts.get(key, 0) + 1
    keys = sorted(k for k, c in counts.items() if c >= 2)
    lm_index = {k: i for i, k in enumerate(keys)}
    landmarks = np.array([window.landmarks[k] for k in keys]).reshape(-1, 3)

    o_s, o_l, o_sen, o_px = [], [], [], []
    for i, f in enumerate(frames):
        for key, px in f.observations.items():
            j = lm_index.get(key)
            if j is None:
                continue
            o_s.append(i)
            o_l.append(j)
            o_sen.append(key[0])
            o_px.append(px)
    o_s = np.array(o_s, dtype=np.int64)
    o_l = np.array(o_l, dtype=np.int64)
    o_sen = np.array(o_sen, dtype=np.int64)
    o_px = np.array(o_px, dtype=float).reshape(-1, 2)

    extr = {0: calib.T_S_C0, 1: calib.T_S_C1}
    cams = {0: calib.event_camera, 1: calib.standard_camera}
    # drop observations currently behind their camera
    if len(o_s):
        keep = np.ones(len(o_s), dtype=bool)
        for s in (0, 1):
            m = o_sen == s
            if not m.any():
                continue
            R = np.array([states[i].T_WS.R for i in o_s[m]])
            p = np.array([states[i].T_WS.translation for i in o_s[m]])
            _, _, _, depth = _reprojection_batch(R, p, extr[s], cams[s], landmarks[o_l[m]], o_px[m])
            keep[np.flatnonzero(m)[depth <= 1e-6]] = False
        o_s, o_l, o_sen, o_px = o_s[keep], o_l[keep], o_sen[keep], o_px[keep]
    sig = np.where(o_sen == 0, params.sigma_px_event, params.sigma_px_frame).astype(float)

    inertial = []
    for i in range(len(frames) - 1):
        pre = window.preintegration(frames[i], frames[i + 1], imu, calib)
        cov = residual_covariance(pre, states[i].T_WS.R, calib.gyro_random_walk, calib.accel_random_walk)
        info = np.linalg.inv(cov)
        info = 0.5 * (info + info.T)
        sqrt_info = np.linalg.cholesky(info).T
        inertial.append(InertialTerm(i, i + 1, pre, sqrt_info, calib.gravity_magnitude))

    # the no-motion prior acts on the newest frame only
    gated = zero_velocity or frames[-1].zero_velocity
    zv = [(len(frames) - 1, params.sigma_zero_velocity)] if gated else []
    return Problem(
        states, fixed, keys, landmarks, o_s, o_l, o_sen, o_px, sig, inertial, zv, extr, cams, params.huber_scale_px
    )


# --------------------------------------------------------------------------
# cost and linearisation
# --------------------------------------------------------------------------


def _reprojection_terms(problem, states, landmarks, with_jacobians):
    n = len(problem.obs_state)
    e = np.zeros((n, 2))
    Jp = np.zeros((n, 2, 6))
    Jl = np.zeros((n, 2, 3))
    depth = np.ones(n)
    if n == 0:
        return e, Jp, Jl, depth
    R_all = np.array([s.T_WS.R for s in states])
    p_all = np.array([s.T_WS.translation for s in states])
    for s in (0, 1):
        m = problem.obs_sensor == s
        if not m.any():
            continue
        idx = problem.obs_state[m]
        e[m], Jp[m], Jl[m], depth[m] = _reprojection_batch(
            R_all[idx], p_all[idx], problem.extrinsics[s], problem.cameras[s],
            landmarks[problem.obs_landmark[m]], problem.obs_pixel[m],
        )
    return e, Jp, Jl, depth


def evaluate_cost(problem, states=None, landmarks=None):
    """Total cost ``0.5 * sum`` of robustified, whitened squared residuals."""
    states = problem.states if states is None else states
    landmarks = problem.landmarks if landmarks is None else landmarks
    e, _, _, depth = _reprojection_terms(problem, states, landmarks, False)
    if np.any(depth <= 0):
        return math.inf
    cost = 0.0
    if len(e):
        norm = np.linalg.norm(e, axis=1)
        _, rho = huber_weight(norm, problem.huber)
        cost += float(np.sum(rho / problem.obs_sigma**2))
    for term in problem.inertial:
        r = term.sqrt_info @ inertial_error(term.pre, states[term.a], states[term.b], term.gravity, False)
        cost += float(r @ r)
    for i, sigma in problem.zero_velocity:
        cost += float(states[i].v @ states[i].v) / sigma**2
    return 0.5 * cost


def _linearize(problem):
    """Normal equations split into state, landmark and coupling blocks."""
    ns = problem.n_states
    L = len(problem.landmarks)
    H_ss = np.zeros((ns * STATE_DIM, ns * STATE_DIM))
    g_s = np.zeros(ns * STATE_DIM)
    H_ll = np.zeros((L, 3, 3))
    g_l = np.zeros((L, 3))
    H_sl = np.zeros((ns, L, POSE_DIM, 3))

    e, Jp, Jl, _ = _reprojection_terms(problem, problem.states, problem.landmarks, True)
    if len(e):
        norm = np.linalg.norm(e, axis=1)
        w, _ = huber_weight(norm, problem.huber)
        w = w / problem.obs_sigma**2
        si, li = problem.obs_state, problem.obs_landmark
        WJpT = (Jp * w[:, None, None]).transpose(0, 2, 1)
        WJlT = (Jl * w[:, None, None]).transpose(0, 2, 1)
        Hpp = WJpT @ Jp
        Hll = WJlT @ Jl
        Hpl = WJpT @ Jl
        gp = (WJpT @ e[:, :, None])[:, :, 0]
        gl = (WJlT @ e[:, :, None])[:, :, 0]
        pose_blocks = np.zeros((ns, POSE_DIM, POSE_DIM))
        np.add.at(pose_blocks, si, Hpp)
        pose_grad = np.zeros((ns, POSE_DIM))
        np.add.at(pose_grad, si, gp)
        for i in range(ns):
            o = i * STATE_DIM
            H_ss[o : o + POSE_DIM, o : o + POSE_DIM] += pose_blocks[i]
            g_s[o : o + POSE_DIM] += pose_grad[i]
        np.add.at(H_ll, li, Hll)
        np.add.at(g_l, li, gl)
        np.add.at(H_sl, (si, li), Hpl)

    for term in problem.inertial:
        r, Ja, Jb = inertial_error(term.pre, problem.states[term.a], problem.states[term.b], term.gravity, True)
        S = term.sqrt_info
        r, Ja, Jb = S @ r, S @ Ja, S @ Jb
        a, b = term.a * STATE_DIM, term.b * STATE_DIM
        sa, sb = slice(a, a + STATE_DIM), slice(b, b + STATE_DIM)
        H_ss[sa, sa] += Ja.T @ Ja
        H_ss[sb, sb] += Jb.T @ Jb
        H_ss[sa, sb] += Ja.T @ Jb
        H_ss[sb, sa] += Jb.T @ Ja
        g_s[sa] += Ja.T @ r
        g_s[sb] += Jb.T @ r

    for i, sigma in problem.zero_velocity:
        r, info = zero_velocity_prior(problem.states[i], sigma)
        J = zero_velocity_jacobian(problem.states[i])
        sl = slice(i * STATE_DIM, (i + 1) * STATE_DIM)
        H_ss[sl, sl] += J.T @ info @ J
        g_s[sl] += J.T @ info @ r
    return H_ss, g_s, H_ll, g_l, H_sl


def _free_state_indices(problem):
    idx = []
    for i in range(problem.n_states):
        start = POSE_DIM if i in problem.fixed_pose else 0
        idx.extend(range(i * STATE_DIM + start, (i + 1) * STATE_DIM))
    return np.array(idx, dtype=np.int64)


def _solve_damped(problem, lin, lam):
    """Schur-complement solve of ``(H + lam diag H) dx = -g``."""
    H_ss, g_s, H_ll, g_l, H_sl = lin
    ns = problem.n_states
    L = len(problem.landmarks)

    Hs = H_ss + lam * np.diag(np.maximum(np.diag(H_ss), 1e-9))
    Hl = H_ll.copy()
    if L:
        d = np.maximum(np.einsum("lii->li", H_ll), 1e-9)
        Hl[:, [0, 1, 2], [0, 1, 2]] += lam * d
        Hl_inv = np.linalg.inv(Hl)
        # coupling scattered into full state coordinates (pose rows only)
        C = np.zeros((ns, STATE_DIM, L, 3))
        C[:, :POSE_DIM] = H_sl.transpose(0, 2, 1, 3)
        C = C.reshape(ns * STATE_DIM, L * 3)
        Y = (C.reshape(-1, L, 3).transpose(1, 0, 2) @ Hl_inv).transpose(1, 0, 2).reshape(-1, L * 3)
        S = Hs - Y @ C.T
        rhs = -g_s + Y @ g_l.reshape(-1)
    else:
        S, rhs = Hs, -g_s
    free = _free_state_indices(problem)
    dx = np.zeros(ns * STATE_DIM)
    S_ff = S[np.ix_(free, free)]
    S_ff = 0.5 * (S_ff + S_ff.T)
    # Jacobi scaling: inertial and visual blocks differ by ~10 orders of magnitude
    D = 1.0 / np.sqrt(np.maximum(np.diag(S_ff), 1e-300))
    S_sc = S_ff * D[:, None] * D[None, :]
    r_sc = rhs[free] * D
    try:
        c = np.linalg.cholesky(S_sc)
        y = scipy.linalg.solve_triangular(c, r_sc, lower=True)
        dx[free] = D * scipy.linalg.solve_triangular(c.T, y, lower=False)
    except np.linalg.LinAlgError:
        dx[free] = D * np.linalg.lstsq(S_sc, r_sc, rcond=None)[0]
    if L:
        b = g_l + (dx @ C).reshape(L, 3)
        dl = -(Hl_inv @ b[:, :, None])[:, :, 0]
    else:
        dl = np.zeros((0, 3))
    return dx.reshape(ns, STATE_DIM), dl


def _apply(problem, dx, dl):
    states = []
    for i, (s, d) in enumerate(zip(problem.states, dx)):
        if i in problem.fixed_pose:
            states.append(SensorState(s.t, s.T_WS, s.v + d[6:9], s.bg + d[9:12], s.ba + d[12:15]))
        else:
            states.append(s.retract(d))
    return states, problem.landmarks + dl


@dataclass
class SolveReport:
    iterations: int
    accepted: int
    costs: list  # cost after each accepted step, preceded by the initial cost
    converged: bool
    reason: str

    @property
    def initial_cost(self):
        return self.costs[0]

    @property
    def final_cost(self):
        return self.costs[-1]


def solve(problem, params=None):
    """Levenberg-Marquardt on ``problem`` in place; returns a :class:`SolveReport`."""
    params = params or BackendParams()
    cost = evaluate_cost(problem)
    if not math.isfinite(cost):
        raise NumericalFailure("non-finite initial cost")
    costs = [cost]
    lam = params.lm_initial_lambda
    accepted = 0
    reason = "max_iterations"
    converged = False
    it = 0
    lin = None
    while it < params.lm_max_iterations:
        it += 1
        if lin is None:
            lin = _linearize(problem)
        dx, dl = _solve_damped(problem, lin, lam)
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dl))):
            lam *= 10.0
            continue
        step = math.sqrt(float(np.sum(dx * dx) + np.sum(dl * dl)))
        if step < params.step_tolerance:
            reason, converged = "small_step", True
            break
        states, landmarks = _apply(problem, dx, dl)
        new_cost = evaluate_cost(problem, states, landmarks)
        if math.isfinite(new_cost) and new_cost < cost:
            problem.states = states
            problem.landmarks = landmarks
            rel = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            costs.append(cost)
            accepted += 1
            lin = None
            lam = max(lam / 10.0, 1e-12)
            if rel < params.relative_cost_tolerance:
                reason, converged = "small_decrease", True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                reason = "lambda_overflow"
                break
    return SolveReport(it, accepted, costs, converged, reason)


def write_back(window, problem):
    """Copy optimised states and landmarks from ``problem`` into ``window``."""
    frames = sorted(window.frames, key=lambda f: f.t)
    for f, s in zip(frames, problem.states):
        f.state = s
    for key, pos in zip(problem.landmark_keys, problem.landmarks):
        window.landmarks[key] = pos.copy()
