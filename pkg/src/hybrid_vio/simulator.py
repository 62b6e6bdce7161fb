"""Deterministic sensor simulator: events, frames, IMU and ground truth.

Everything derives from one analytic trajectory over a textured ground
plane (world ``z = 0``), so the three streams are mutually consistent.
The rig is DAVIS-like: event and standard cameras share a pixel array
and look down from the body frame.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numba
import numpy as np

from .dataset_io import Dataset, EventArray, ImuArray, IntensityFrame, Trajectory
from .errors import ConfigError, OutOfRange
from .geometry import CalibrationBundle, CameraModel, Se3Transform, so3_exp

GRAVITY = 9.81


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


@dataclass
class TrajectorySpec:
    """Analytic body trajectory.

    ``circle`` flies a horizontal circle of ``radius`` at ``angular_velocity``
    after ``static_time`` seconds at rest and a C2 speed ramp of
    ``ramp_time`` seconds. ``hover`` holds position with optional
    vibration; ``sinusoid-6dof`` oscillates all six degrees of freedom.
    Vibration is faded in with the same static time and ramp.
    """

    kind: str = "circle"
    radius: float = 1.2
    angular_velocity: float = 1.4
    height: float = 1.0
    duration: float = 10.0
    static_time: float = 0.0
    ramp_time: float = 0.0
    vibration_amplitude: float = 0.0
    vibration_frequency: float = 4.0
    vibration_angle: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if self.kind not in ("circle", "hover", "sinusoid-6dof"):
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        if self.duration <= 0:
            raise ConfigError("trajectory duration must be positive")


@dataclass
class TrajectorySample:
    R_WS: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    omega_W: np.ndarray

    @property
    def pose(self):
        return Se3Transform.from_rt(self.R_WS, self.position)


def _euler_rotation(roll, pitch, yaw):
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    Ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    Rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz, Ry, Rx


def _phase(spec, t):
    """Circle phase and its first two derivatives with a C2 ramp."""
    w = spec.angular_velocity
    ts, tr = spec.static_time, spec.ramp_time
    if t < ts:
        return 0.0, 0.0, 0.0
    if tr > 0 and t < ts + tr:
        u = (t - ts) / tr
        s = u**3 * (10 - 15 * u + 6 * u * u)
        ds = 30 * u * u * (1 - u) ** 2
        S = u**4 * (2.5 - 3 * u + u * u)
        return w * tr * S, w * s, w * ds / tr
    return w * (0.5 * tr + (t - ts - tr)), w, 0.0


def _envelope(spec, t):
    """C2 fade-in ``0 -> 1`` over the ramp after the static time, with derivatives."""
    ts, tr = spec.static_time, spec.ramp_time
    if t < ts:
        return 0.0, 0.0, 0.0
    if tr > 0 and t < ts + tr:
        u = (t - ts) / tr
        s = u**3 * (10 - 15 * u + 6 * u * u)
        ds = 30 * u * u * (1 - u) ** 2 / tr
        dds = 60 * u * (1 - u) * (1 - 2 * u) / tr**2
        return s, ds, dds
    return 1.0, 0.0, 0.0


def _sines(amplitudes, freqs, phases, t):
    arg = 2 * math.pi * freqs * t + phases
    w = 2 * math.pi * freqs
    return amplitudes * np.sin(arg), amplitudes * w * np.cos(arg), -amplitudes * w * w * np.sin(arg)


_VIB_FREQ_RATIOS = np.array([1.0, 1.37, 0.83])
_VIB_PHASES = np.array([0.3, 1.9, 4.1])
_ANG_FREQ_RATIOS = np.array([1.21, 0.91, 1.53])
_ANG_PHASES = np.array([2.2, 0.7, 5.3])


def sample_trajectory(spec, t):
    """Closed-form pose, velocity, acceleration and angular velocity at ``t``."""
    if t < -1e-12 or t > spec.duration + 1e-12:
        raise OutOfRange(f"t={t} outside [0, {spec.duration}]")
    p = np.array([0.0, 0.0, spec.height])
    v = np.zeros(3)
    a = np.zeros(3)
    euler = np.array([0.0, 0.0, spec.yaw])
    deuler = np.zeros(3)

    if spec.kind == "circle":
        phi, dphi, ddphi = _phase(spec, t)
        r = spec.radius
        c, s = math.cos(phi), math.sin(phi)
        p = np.array([r * c, r * s, spec.height])
        v = np.array([-r * s * dphi, r * c * dphi, 0.0])
        a = np.array([-r * s * ddphi - r * c * dphi**2, r * c * ddphi - r * s * dphi**2, 0.0])
    elif spec.kind == "sinusoid-6dof":
        amp = np.array([0.3, 0.25, 0.1])
        freqs = np.array([0.25, 0.31, 0.4])
        dp, dv, da = _sines(amp, freqs, _VIB_PHASES, t)
        p = p + dp
        v = v + dv
        a = a + da
        ea, ed, _ = _sines(np.array([0.15, 0.12, 0.3]), np.array([0.35, 0.28, 0.2]), _ANG_PHASES, t)
        euler = euler + ea
        deuler = deuler + ed

    env, denv, ddenv = _envelope(spec, t) if spec.kind == "hover" else (1.0, 0.0, 0.0)
    if spec.vibration_amplitude > 0:
        f = spec.vibration_frequency * _VIB_FREQ_RATIOS
        dp, dv, da = _sines(spec.vibration_amplitude * np.array([1.0, 1.0, 0.5]), f, _VIB_PHASES, t)
        p = p + env * dp
        v = v + env * dv + denv * dp
        a = a + env * da + 2 * denv * dv + ddenv * dp
    if spec.vibration_angle > 0:
        f = spec.vibration_frequency * _ANG_FREQ_RATIOS
        ea, ed, _ = _sines(spec.vibration_angle * np.array([1.0, 1.0, 0.5]), f, _ANG_PHASES, t)
        euler = euler + env * ea
        deuler = deuler + env * ed + denv * ea

    roll, pitch, yaw = euler
    Rz, Ry, Rx = _euler_rotation(roll, pitch, yaw)
    R = Rz @ Ry @ Rx
    omega = deuler[2] * np.array([0, 0, 1.0]) + deuler[1] * (Rz @ np.array([0, 1.0, 0])) + deuler[0] * (Rz @ Ry @ np.array([1.0, 0, 0]))
    return TrajectorySample(R, p, v, a, omega)


def max_speeds(spec, step=0.01):
    """Maximum linear speed (m/s) and angular rate (rad/s) along the trajectory."""
    ts = np.arange(0.0, spec.duration + 1e-9, step)
    vmax = wmax = 0.0
    for t in ts:
        s = sample_trajectory(spec, min(t, spec.duration))
        vmax = max(vmax, float(np.linalg.norm(s.velocity)))
        wmax = max(wmax, float(np.linalg.norm(s.omega_W)))
    return vmax, wmax


# --------------------------------------------------------------------------
# scene
# --------------------------------------------------------------------------


@dataclass
class Scene:
    """Ground plane ``z = 0`` with an analytic procedural texture.

    ``dots`` texture: base level plus a few dozen broad smooth bumps and a
    jittered grid of small bright Gaussian dots. ``step`` texture: a smooth
    vertical edge at ``x = edge_x`` (used by tests).
    """

    kind: str = "dots"
    seed: int = 7
    extent: float = 3.5
    base: float = 0.22
    n_bumps: int = 40
    bump_amplitude: float = 0.06
    dot_spacing: float = 0.16
    dot_sigma: float = 0.008
    dot_amplitude: float = 0.62
    edge_x: float = 0.0
    edge_low: float = 0.2
    edge_high: float = 0.8
    edge_width: float = 0.002
    resolution: float = 0.0025

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        e = self.extent
        self._bumps = np.column_stack(
            [
                rng.uniform(-e, e, self.n_bumps),
                rng.uniform(-e, e, self.n_bumps),
                rng.uniform(0.08, 0.3, self.n_bumps),
                rng.uniform(-1, 1, self.n_bumps) * self.bump_amplitude,
            ]
        )
        g = np.arange(-e, e + 1e-9, self.dot_spacing)
        gx, gy = np.meshgrid(g, g)
        jitter = rng.uniform(-0.3, 0.3, (2,) + gx.shape) * self.dot_spacing
        self._dots = np.column_stack([(gx + jitter[0]).ravel(), (gy + jitter[1]).ravel()])
        self._lut = None

    # analytic texture ------------------------------------------------------
    def intensity(self, xy):
        """Texture value in [0, 1] at plane points ``(..., 2)``."""
        xy = np.asarray(xy, dtype=float)
        return np.clip(self._raw(xy)[0], 0.0, 1.0)

    def gradient(self, xy):
        xy = np.asarray(xy, dtype=float)
        return self._raw(xy)[1]

    def _raw(self, xy):
        x, y = xy[..., 0], xy[..., 1]
        if self.kind == "step":
            z = (x - self.edge_x) / self.edge_width
            s = 0.5 * (1 + np.tanh(z))
            val = self.edge_low + (self.edge_high - self.edge_low) * s
            dv = (self.edge_high - self.edge_low) * 0.5 * (1 - np.tanh(z) ** 2) / self.edge_width
            return val, np.stack([dv, np.zeros_like(dv)], axis=-1)
        val = np.full(x.shape, self.base)
        grad = np.zeros(x.shape + (2,))
        for cx, cy, sig, amp in self._bumps:
            dx, dy = x - cx, y - cy
            g = amp * np.exp(-(dx * dx + dy * dy) / (2 * sig * sig))
            val = val + g
            grad[..., 0] += -g * dx / (sig * sig)
            grad[..., 1] += -g * dy / (sig * sig)
        sig = self.dot_sigma
        for cx, cy in self._dots:
            dx, dy = x - cx, y - cy
            near = (np.abs(dx) < 5 * sig) & (np.abs(dy) < 5 * sig)
            if not np.any(near):
                continue
            g = self.dot_amplitude * np.exp(-(dx * dx + dy * dy) / (2 * sig * sig))
            val = val + g
            grad[..., 0] += -g * dx / (sig * sig)
            grad[..., 1] += -g * dy / (sig * sig)
        return val, grad

    # rasterised lookup ------------------------------------------------------
    def _build_lut(self):
        e, h = self.extent, self.resolution
        axis = np.arange(-e, e + 0.5 * h, h)
        n = len(axis)
        if self.kind == "step":
            X, Y = np.meshgrid(axis, axis[:2])
            row = self.intensity(np.stack([X, Y], axis=-1))[0]
            lut = np.tile(row, (n, 1))
        else:
            lut = np.full((n, n), self.base)
            for cx, cy, sig, amp in self._bumps:
                gx = np.exp(-((axis - cx) ** 2) / (2 * sig * sig))
                gy = np.exp(-((axis - cy) ** 2) / (2 * sig * sig))
                lut += amp * np.outer(gy, gx)
            sig = self.dot_sigma
            r = int(math.ceil(5 * sig / h))
            for cx, cy in self._dots:
                ix, iy = int(round((cx + e) / h)), int(round((cy + e) / h))
                x0, x1 = max(ix - r, 0), min(ix + r + 1, n)
                y0, y1 = max(iy - r, 0), min(iy + r + 1, n)
                if x0 >= x1 or y0 >= y1:
                    continue
                gx = np.exp(-((axis[x0:x1] - cx) ** 2) / (2 * sig * sig))
                gy = np.exp(-((axis[y0:y1] - cy) ** 2) / (2 * sig * sig))
                lut[y0:y1, x0:x1] += self.dot_amplitude * np.outer(gy, gx)
            lut = np.clip(lut, 0.0, 1.0)
        self._lut = lut.astype(np.float32)
        self._log_lut = np.log(self._lut + LOG_EPS).astype(np.float32)

    def _table(self, which):
        if self._lut is None:
            self._build_lut()
        return self._lut if which == "lin" else self._log_lut

    def sample(self, X, Y):
        """Rasterised texture (bilinear, ``resolution`` m grid)."""
        return _bilinear(self._table("lin"), X, Y, self.extent, self.resolution, self.base)

    def sample_log(self, X, Y):
        return _bilinear(self._table("log"), X, Y, self.extent, self.resolution, math.log(self.base + LOG_EPS))

    def render(self, cam, T_WC, which="lin", no_hit=0.5):
        """Texture seen through every pixel of ``cam`` at pose ``T_WC``."""
        rays = cam.pixel_rays.reshape(-1, 2)
        table = self._table(which)
        outside = self.base if which == "lin" else math.log(self.base + LOG_EPS)
        out = _render_kernel(
            rays, np.ascontiguousarray(T_WC.R), np.ascontiguousarray(T_WC.translation, dtype=np.float64),
            table, self.extent, self.resolution, outside, no_hit,
        )
        return out.reshape(cam.height, cam.width)


LOG_EPS = 1e-3


def _bilinear(table, X, Y, extent, h, outside):
    n = table.shape[0]
    fx = (np.asarray(X) + extent) / h
    fy = (np.asarray(Y) + extent) / h
    inside = (fx >= 0) & (fy >= 0) & (fx < n - 1) & (fy < n - 1)
    fx = np.where(inside, fx, 0.0)
    fy = np.where(inside, fy, 0.0)
    ix = fx.astype(np.int64)
    iy = fy.astype(np.int64)
    ax = fx - ix
    ay = fy - iy
    v = (
        table[iy, ix] * (1 - ax) * (1 - ay)
        + table[iy, ix + 1] * ax * (1 - ay)
        + table[iy + 1, ix] * (1 - ax) * ay
        + table[iy + 1, ix + 1] * ax * ay
    )
    return np.where(inside, v, outside)


@numba.njit(cache=True, fastmath=False)
def _render_kernel(rays, R, c, table, extent, h, outside, no_hit):
    n = table.shape[0]
    out = np.empty(rays.shape[0])
    for i in range(rays.shape[0]):
        x, y = rays[i, 0], rays[i, 1]
        dx = R[0, 0] * x + R[0, 1] * y + R[0, 2]
        dy = R[1, 0] * x + R[1, 1] * y + R[1, 2]
        dz = R[2, 0] * x + R[2, 1] * y + R[2, 2]
        if dz == 0.0 or c[2] * dz >= 0.0:
            out[i] = no_hit
            continue
        s = -c[2] / dz
        fx = (c[0] + s * dx + extent) / h
        fy = (c[1] + s * dy + extent) / h
        if fx < 0 or fy < 0 or fx >= n - 1 or fy >= n - 1:
            out[i] = outside
            continue
        ix = int(fx)
        iy = int(fy)
        ax = fx - ix
        ay = fy - iy
        out[i] = (
            table[iy, ix] * (1 - ax) * (1 - ay)
            + table[iy, ix + 1] * ax * (1 - ay)
            + table[iy + 1, ix] * (1 - ax) * ay
            + table[iy + 1, ix + 1] * ax * ay
        )
    return out


def plane_hits(cam, T_WC):
    """World ``(X, Y)`` where each pixel ray meets ``z = 0`` plus a hit mask."""
    rays = cam.pixel_rays
    d_c = np.concatenate([rays, np.ones(rays.shape[:2] + (1,))], axis=-1)
    d_w = d_c @ T_WC.R.T
    c = T_WC.translation
    dz = d_w[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -c[2] / dz
    hit = (dz < 0) & (s > 0) if c[2] > 0 else (dz > 0) & (s > 0)
    s = np.where(hit, s, 0.0)
    X = c[0] + s * d_w[..., 0]
    Y = c[1] + s * d_w[..., 1]
    return X, Y, hit


# --------------------------------------------------------------------------
# noise and rig
# --------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    gyro_noise_density: float = 0.0
    accel_noise_density: float = 0.0
    gyro_random_walk: float = 0.0
    accel_random_walk: float = 0.0
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    contrast_threshold: float = 0.3
    threshold_jitter: float = 0.0
    noise_event_rate: float = 0.0
    read_noise: float = 0.0
    blur: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ConfigError(f"noise parameter {f.name} must be non-negative")
        if self.contrast_threshold <= 0:
            raise ConfigError("contrast threshold must be positive")


def davis_camera():
    return CameraModel(240, 180, 199.0, 199.0, 119.6, 89.4, -0.06, 0.015, 0.0008, -0.0004, 0.0)


def down_looking_extrinsics(offset=(0.02, 0.0, -0.01)):
    """Camera optical axis along body ``-z``; camera x along body x."""
    return Se3Transform.from_rt(np.diag([1.0, -1.0, -1.0]), offset)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------




MID_GRAY = 128.0


def _camera_poses(trajectory, times, T_S_C):
    out = []
    for t in times:
        t = min(max(t, 0.0), trajectory.duration)
        out.append(sample_trajectory(trajectory, t).pose @ T_S_C)
    return out


def render_frame(
    scene,
    pose,
    cam,
    exposure_time=0.0,
    noise=None,
    rng=None,
    *,
    brightness=255.0,
    illumination=1.0,
    trajectory=None,
    t=None,
    T_S_C=None,
    n_sub=8,
):
    """Render an 8-bit frame of ``scene`` seen from camera pose ``pose`` (T_WC).

    Pixel value is ``brightness * illumination * texture`` plus read noise.
    With blur enabled and a trajectory given, the texture is averaged over
    ``n_sub`` poses spread across the exposure centred on ``t``.
    """
    if exposure_time < 0:
        raise ValueError("exposure_time must be non-negative")
    noise = noise if noise is not None else NoiseSpec()
    if noise.blur and exposure_time > 0 and trajectory is not None and t is not None:
        n_sub = max(int(n_sub), 8)
        offsets = (np.arange(n_sub) + 0.5) / n_sub * exposure_time - 0.5 * exposure_time
        T_S_C = T_S_C if T_S_C is not None else Se3Transform.identity()
        poses = _camera_poses(trajectory, t + offsets, T_S_C)
    else:
        poses = [pose]

    acc = np.zeros((cam.height, cam.width))
    for T_WC in poses:
        tex = scene.render(cam, T_WC, "lin", no_hit=-1.0)
        acc += np.where(tex >= 0, brightness * illumination * tex, MID_GRAY)
    img = acc / len(poses)
    if noise.read_noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        img = img + rng.normal(0.0, noise.read_noise, img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return IntensityFrame(float(t) if t is not None else 0.0, pixels)


def auto_expose(mean_intensity, current_exposure, target=70.0, gain=0.5, bounds=(1e-5, 0.03)):
    """Proportional exposure controller driving the mean intensity to ``target``."""
    lo, hi = bounds
    nxt = current_exposure * (1.0 + gain * (target - mean_intensity) / target)
    return float(min(max(nxt, lo), hi))


# --------------------------------------------------------------------------
# events
# --------------------------------------------------------------------------


def threshold_crossings(L_prev, L_new, L_ref, C, t_prev, t_new):
    """Contrast-threshold crossings of per-pixel log intensity over one step.

    ``L`` varies linearly between ``L_prev`` at ``t_prev`` and ``L_new`` at
    ``t_new``. Returns ``(pixel_index, times, polarity, updated_L_ref)``; a
    pixel crossing ``k`` thresholds yields ``k`` events.
    """
    diff = L_new - L_ref
    idx = np.flatnonzero(np.abs(diff) >= C)
    L_ref = L_ref.copy()
    if idx.size == 0:
        return idx, np.empty(0), np.empty(0, np.int8), L_ref
    d = diff[idx]
    c = C[idx] if np.ndim(C) else np.full(idx.size, C)
    k = np.floor(np.abs(d) / c).astype(np.int64)
    sign = np.sign(d)
    pix = np.repeat(idx, k)
    starts = np.repeat(np.cumsum(k) - k, k)
    j = np.arange(pix.size) - starts + 1
    s_rep = np.repeat(sign, k)
    c_rep = np.repeat(c, k)
    level = L_ref[pix] + s_rep * j * c_rep
    lp, ln = L_prev[pix], L_new[pix]
    span = ln - lp
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(span != 0, (level - lp) / span, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    times = t_prev + frac * (t_new - t_prev)
    L_ref[idx] += sign * k * c
    return pix, times, s_rep.astype(np.int8), L_ref


def default_event_step(spec, cam, max_pixel_step=0.5, cap=1e-3):
    """Time step keeping per-step image motion below ``max_pixel_step`` pixels."""
    vmax, wmax = max_speeds(spec)
    depth = max(spec.height - 3 * spec.vibration_amplitude, 0.1)
    f = max(cam.fx, cam.fy)
    half_diag = math.hypot(cam.width, cam.height) / (2 * f)
    speed = f * (vmax / depth + wmax * (1 + half_diag**2))
    if speed <= 0:
        return cap
    return min(cap, max_pixel_step / speed)


def generate_events(
    scene,
    spec,
    cam,
    noise,
    duration=None,
    *,
    T_S_C=None,
    seed=0,
    dt=None,
    max_pixel_step=0.5,
):
    """Contrast-threshold events for the camera riding trajectory ``spec``."""
    if noise.contrast_threshold <= 0:
        raise ConfigError("contrast threshold must be positive")
    duration = spec.duration if duration is None else min(duration, spec.duration)
    T_S_C = T_S_C if T_S_C is not None else Se3Transform.identity()
    rng = np.random.default_rng(seed)
    npix = cam.width * cam.height
    C = np.full(npix, noise.contrast_threshold)
    if noise.threshold_jitter > 0:
        C = C + rng.normal(0.0, noise.threshold_jitter, npix)
        C = np.maximum(C, 0.25 * noise.contrast_threshold)
    dt = dt if dt is not None else default_event_step(spec, cam, max_pixel_step)
    n_steps = max(int(math.ceil(duration / dt - 1e-9)), 1)
    times = np.linspace(0.0, duration, n_steps + 1)
    no_hit = math.log(MID_GRAY / 255.0 + LOG_EPS)

    def log_image(t):
        return scene.render(cam, sample_trajectory(spec, t).pose @ T_S_C, "log", no_hit).ravel()

    L_prev = log_image(0.0)
    L_ref = L_prev.copy()
    prev_pose = None
    out_pix, out_t, out_p = [], [], []
    for k in range(1, n_steps + 1):
        t = times[k]
        sample = sample_trajectory(spec, t)
        key = np.concatenate([sample.R_WS.ravel(), sample.position])
        if prev_pose is not None and np.array_equal(key, prev_pose):
            continue
        prev_pose = key
        L_new = log_image(t)
        pix, te, pol, L_ref = threshold_crossings(L_prev, L_new, L_ref, C, times[k - 1], t)
        if pix.size:
            out_pix.append(pix)
            out_t.append(te)
            out_p.append(pol)
        L_prev = L_new

    if noise.noise_event_rate > 0:
        n = rng.poisson(noise.noise_event_rate * duration)
        out_t.append(rng.uniform(0.0, duration, n))
        out_pix.append(rng.integers(0, npix, n))
        out_p.append(rng.choice(np.array([-1, 1], np.int8), n))

    if not out_t:
        return EventArray.empty()
    t_all = np.concatenate(out_t)
    pix_all = np.concatenate(out_pix)
    p_all = np.concatenate(out_p)
    order = np.argsort(t_all, kind="stable")
    pix_all = pix_all[order]
    return EventArray(t_all[order], pix_all % cam.width, pix_all // cam.width, p_all[order])


def log_intensity(scene, spec, cam, t, T_S_C=None):
    """Per-pixel log intensity image the event model thresholds against."""
    T_S_C = T_S_C if T_S_C is not None else Se3Transform.identity()
    no_hit = math.log(MID_GRAY / 255.0 + LOG_EPS)
    return scene.render(cam, sample_trajectory(spec, t).pose @ T_S_C, "log", no_hit)


# --------------------------------------------------------------------------
# IMU
# --------------------------------------------------------------------------


@dataclass
class BiasTrace:
    t: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray


def generate_imu(spec, noise, rate=1000.0, *, seed=0, gravity=GRAVITY, duration=None):
    """IMU samples along ``spec`` and the true bias trajectories."""
    if rate <= 0:
        raise ConfigError("IMU rate must be positive")
    duration = spec.duration if duration is None else min(duration, spec.duration)
    n = int(math.floor(duration * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    dt = 1.0 / rate
    rng = np.random.default_rng(seed)
    g = np.array([0.0, 0.0, -gravity])

    gyro = np.empty((n, 3))
    accel = np.empty((n, 3))
    for i, ti in enumerate(t):
        s = sample_trajectory(spec, ti)
        gyro[i] = s.R_WS.T @ s.omega_W
        accel[i] = s.R_WS.T @ (s.acceleration - g)

    steps_g = rng.normal(0.0, 1.0, (n, 3)) * noise.gyro_random_walk * math.sqrt(dt)
    steps_a = rng.normal(0.0, 1.0, (n, 3)) * noise.accel_random_walk * math.sqrt(dt)
    steps_g[0] = steps_a[0] = 0.0
    bg = np.asarray(noise.gyro_bias, dtype=float) + np.cumsum(steps_g, axis=0)
    ba = np.asarray(noise.accel_bias, dtype=float) + np.cumsum(steps_a, axis=0)
    white_g = rng.normal(0.0, 1.0, (n, 3)) * noise.gyro_noise_density / math.sqrt(dt)
    white_a = rng.normal(0.0, 1.0, (n, 3)) * noise.accel_noise_density / math.sqrt(dt)
    imu = ImuArray(t, accel + ba + white_a, gyro + bg + white_g)
    return imu, BiasTrace(t, bg, ba)


def groundtruth(spec, rate=200.0, duration=None):
    duration = spec.duration if duration is None else min(duration, spec.duration)
    n = int(math.floor(duration * rate + 1e-9)) + 1
    times = np.arange(n) / rate
    samples = [sample_trajectory(spec, t) for t in times]
    return Trajectory.from_poses(times, [s.pose for s in samples], np.array([s.velocity for s in samples]))


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------


@dataclass
class Scenario:
    """Complete description of one synthetic sequence."""

    name: str = "circle"
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    scene_seed: int = 7
    seed: int = 0
    frame_rate: float = 24.0
    imu_rate: float = 1000.0
    imu_time_offset: float = 0.0025
    exposure_target: float = 70.0
    exposure_gain: float = 0.5
    sensitivity: float = 60000.0
    blackout: Optional[tuple] = None
    blackout_fade: float = 0.3
    max_pixel_step: float = 0.5
    camera_offset: tuple = (0.02, 0.0, -0.01)

    def illumination(self, t):
        if not self.blackout:
            return 1.0
        a, b = self.blackout
        f = max(self.blackout_fade, 1e-9)
        if t <= a - f or t >= b + f:
            return 1.0
        if a <= t <= b:
            return 0.0
        return (a - t) / f if t < a else (t - b) / f

    def calibration(self):
        cam = davis_camera()
        T = down_looking_extrinsics(self.camera_offset)
        n = self.noise
        return CalibrationBundle(
            cam,
            cam,
            T,
            T,
            self.imu_time_offset,
            max(n.gyro_noise_density, 1e-4),
            max(n.accel_noise_density, 1e-3),
            max(n.gyro_random_walk, 1e-6),
            max(n.accel_random_walk, 1e-5),
            GRAVITY,
        )


MODERATE_NOISE = dict(
    gyro_noise_density=5e-4,
    accel_noise_density=5e-3,
    gyro_random_walk=1e-5,
    accel_random_walk=1e-4,
    gyro_bias=(0.003, -0.002, 0.004),
    accel_bias=(0.03, -0.02, 0.05),
    contrast_threshold=0.3,
    threshold_jitter=0.03,
    noise_event_rate=200.0,
    read_noise=2.0,
    blur=True,
)


def scenario(name, **overrides):
    """Preset scenarios: ``circle``, ``blackout``, ``hover``, ``static``."""
    noise = NoiseSpec(**MODERATE_NOISE)
    if name in ("circle", "blackout"):
        traj = TrajectorySpec("circle", duration=10.0, static_time=1.5, ramp_time=1.0)
    elif name == "hover":
        traj = TrajectorySpec(
            "hover", duration=10.0, static_time=1.5, ramp_time=0.5,
            vibration_amplitude=0.002, vibration_angle=0.002, vibration_frequency=6.0,
        )
    elif name == "static":
        traj = TrajectorySpec("hover", duration=10.0)
    else:
        raise ConfigError(f"unknown scenario {name!r}")
    sc = Scenario(name=name, trajectory=traj, noise=noise)
    if name == "blackout":
        sc.blackout = (4.0, 7.0)
    return replace(sc, **overrides)


def scenario_from_dict(data):
    """Build a scenario from a nested mapping (unknown keys rejected)."""
    data = dict(data or {})
    base = data.pop("preset", data.get("name", "circle"))
    traj = data.pop("trajectory", None)
    noise = data.pop("noise", None)
    allowed = {f.name for f in fields(Scenario)} - {"trajectory", "noise"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if "blackout" in data and data["blackout"] is not None:
        data["blackout"] = tuple(data["blackout"])
    sc = scenario(base, **data)
    try:
        if traj:
            sc.trajectory = replace(sc.trajectory, **traj)
        if noise:
            sc.noise = replace(sc.noise, **noise)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return sc


def scenario_to_dict(sc):
    d = asdict(sc)
    d["noise"]["gyro_bias"] = list(sc.noise.gyro_bias)
    d["noise"]["accel_bias"] = list(sc.noise.accel_bias)
    d["camera_offset"] = list(sc.camera_offset)
    if sc.blackout is not None:
        d["blackout"] = list(sc.blackout)
    return d


def simulate(sc, *, events=True, frames=True):
    """Generate every stream of scenario ``sc`` as an in-memory dataset."""
    seeds = np.random.SeedSequence(sc.seed).spawn(3)
    imu_seed, event_seed, frame_seed = (int(s.generate_state(1)[0]) for s in seeds)
    calib = sc.calibration()
    scene = Scene(seed=sc.scene_seed)
    spec = sc.trajectory

    imu, bias = generate_imu(spec, sc.noise, sc.imu_rate, seed=imu_seed, gravity=calib.gravity_magnitude)
    ev = None
    if events:
        ev = generate_events(
            scene, spec, calib.event_camera, sc.noise, T_S_C=calib.T_S_C0, seed=event_seed, max_pixel_step=sc.max_pixel_step
        )
    frame_list = None
    exposures = []
    if frames:
        frame_list = []
        rng = np.random.default_rng(frame_seed)
        cam = calib.standard_camera
        first = scene.render(cam, sample_trajectory(spec, 0.0).pose @ calib.T_S_C1, "lin", MID_GRAY / 255.0)
        mean_tex = float(first.mean())
        exposure = min(max(sc.exposure_target / (sc.sensitivity * mean_tex), 1e-5), 0.03)
        n = int(math.floor(spec.duration * sc.frame_rate + 1e-9)) + 1
        for k in range(n):
            t = k / sc.frame_rate
            fr = render_frame(
                scene,
                sample_trajectory(spec, t).pose @ calib.T_S_C1,
                cam,
                exposure,
                sc.noise,
                rng,
                brightness=sc.sensitivity * exposure,
                illumination=sc.illumination(t),
                trajectory=spec,
                t=t,
                T_S_C=calib.T_S_C1,
            )
            frame_list.append(fr)
            exposures.append(exposure)
            exposure = auto_expose(float(fr.pixels.mean()), exposure, sc.exposure_target, sc.exposure_gain)
    meta = {
        "scenario": scenario_to_dict(sc),
        "bias": bias,
        "exposures": np.array(exposures),
    }
    return Dataset(calib, imu, ev, frame_list, groundtruth(spec), meta)
