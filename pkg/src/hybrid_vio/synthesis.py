"""Motion-compensated event frames.

Every event of a window is back-projected at the scene depth, moved into
the camera at the window's frame time with the IMU-predicted incremental
motion, re-projected and accumulated into an image that a standard corner
tracker can consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, EmptyWindow, NoVisibleLandmarks
from .geometry import Se3Transform

DEFAULT_C_SAT = 3.0
DEFAULT_FALLBACK_DEPTH = 1.0


@dataclass
class EventFrame:
    t: float
    counts: np.ndarray  # (height, width) accumulated event mass
    normalized: np.ndarray  # (height, width) uint8
    n_in_bounds: int
    n_behind: int = 0
    depth: float = float("nan")


class CameraTrack:
    """Camera poses ``T_WC(t) = T_WS(t) T_SC`` on top of a body pose track."""

    def __init__(self, body_track, T_S_C):
        self.body = body_track
        self.T_S_C = T_S_C

    def query(self, times):
        R, p = self.body.query(times)
        R_SC = self.T_S_C.R
        return R @ R_SC, p + R @ self.T_S_C.translation

    def __call__(self, t):
        R, p = self.query([t])
        return Se3Transform.from_rt(R[0], p[0])


def median_scene_depth(landmarks, T_WC, cam):
    """Median optical-axis depth of the landmarks that project into the image."""
    P = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    P_C = T_WC.inverse().apply(P) if len(P) else P
    if len(P_C):
        uv, valid = cam.project_points(P_C)
        valid &= cam.in_image(uv)
        depths = P_C[valid, 2]
    else:
        depths = np.empty(0)
    if depths.size == 0:
        raise NoVisibleLandmarks("no landmark projects into the image")
    return float(np.median(depths))


def motion_compensate_event(event, T_tk_ti, depth, cam):
    """Pixel where ``event`` would have fired at the window's end time.

    Returns ``(pixel, in_bounds)``; the pixel is not clamped to the image.
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    P = cam.unproject([float(event.x), float(event.y)], depth)
    Q = T_tk_ti.apply(P)
    if Q[2] <= 0:
        raise BehindCamera(f"compensated point has depth {Q[2]:.3g}")
    uv = cam.project(Q)
    return uv, bool(cam.in_image(uv))


def _camera_poses(pose_at, times):
    if hasattr(pose_at, "query"):
        return pose_at.query(times)
    uniq, inv = np.unique(times, return_inverse=True)
    Rs = np.empty((len(uniq), 3, 3))
    ps = np.empty((len(uniq), 3))
    for i, t in enumerate(uniq):
        T = pose_at(float(t))
        Rs[i] = T.R
        ps[i] = T.translation
    return Rs[inv], ps[inv]


def compensate_events(events, t_k, pose_at, depth, cam):
    """Vectorised compensation of a whole event array.

    Returns ``(uv (n, 2), in_front (n,))``; entries with ``in_front`` false
    landed behind the camera and carry NaN coordinates.
    """
    n = len(events)
    if n == 0:
        return np.empty((0, 2)), np.empty(0, bool)
    R_all, p_all = _camera_poses(pose_at, np.append(events.t, t_k))
    R_k, p_k = R_all[-1], p_all[-1]
    R_i, p_i = R_all[:-1], p_all[:-1]
    rays = cam.pixel_rays[events.y, events.x]
    P = np.concatenate([rays * depth, np.full((n, 1), float(depth))], axis=1)
    # camera at t_k <- world <- camera at t_i
    P_w = np.einsum("nij,nj->ni", R_i, P) + p_i
    Q = (P_w - p_k) @ R_k
    uv, valid = cam.project_points(Q)
    uv = np.where(valid[:, None], uv, np.nan)
    return uv, valid


def splat(uv, width, height, mode="bilinear"):
    """Accumulate continuous pixel positions; returns ``(counts, n_in_bounds)``."""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    # undistort/distort round trips leave ~1e-12 px residue; snap it so an
    # identity motion reproduces the raw event pixels exactly
    snapped = np.rint(uv)
    uv = np.where(np.abs(uv - snapped) < 1e-6, snapped, uv)
    x, y = uv[:, 0], uv[:, 1]
    finite = np.isfinite(x) & np.isfinite(y)
    if mode == "nearest":
        xi = np.rint(np.where(finite, x, -1)).astype(np.int64)
        yi = np.rint(np.where(finite, y, -1)).astype(np.int64)
        inside = finite & (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        counts = np.bincount(yi[inside] * width + xi[inside], minlength=width * height)
        return counts.reshape(height, width).astype(float), int(inside.sum())
    if mode != "bilinear":
        raise ValueError(f"unknown splatting mode {mode!r}")
    inside = finite & (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
    x, y = x[inside], y[inside]
    x0 = np.minimum(np.floor(x).astype(np.int64), width - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), height - 2)
    ax, ay = x - x0, y - y0
    base = y0 * width + x0
    idx = np.concatenate([base, base + 1, base + width, base + width + 1])
    w = np.concatenate([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay])
    counts = np.bincount(idx, weights=w, minlength=width * height)
    return counts.reshape(height, width), int(inside.sum())


def normalize_counts(counts, c_sat=DEFAULT_C_SAT):
    if c_sat <= 0:
        raise ValueError("c_sat must be positive")
    return np.rint(np.minimum(counts, c_sat) * (255.0 / c_sat)).astype(np.uint8)


def synthesize_event_frame(window, pose_at, depth, cam, c_sat=DEFAULT_C_SAT, mode="bilinear"):
    """Motion-compensated event frame at the window's frame time.

    ``pose_at`` gives event-camera poses ``T_WC``: either a callable
    ``t -> Se3Transform`` or an object with a batched ``query(times)``
    returning rotations and positions.
    """
    events = window.events
    if len(events) == 0:
        raise EmptyWindow("cannot synthesise a frame from an empty window")
    uv, valid = compensate_events(events, window.frame_time, pose_at, depth, cam)
    counts, n_in = splat(uv, cam.width, cam.height, mode)
    return EventFrame(
        window.frame_time, counts, normalize_counts(counts, c_sat), n_in, int((~valid).sum()), float(depth)
    )


def accumulate_events(events, cam, c_sat=DEFAULT_C_SAT, t=0.0):
    """Naive accumulation at the raw event pixels (no motion compensation)."""
    counts = np.bincount(events.y.astype(np.int64) * cam.width + events.x, minlength=cam.width * cam.height)
    counts = counts.reshape(cam.height, cam.width).astype(float)
    return EventFrame(t, counts, normalize_counts(counts, c_sat), int(len(events)))
