"""Per-sensor feature detection, tracking and landmark triangulation.

The event camera (sensor 0) and the standard camera (sensor 1) each get
their own :class:`SensorFrontend` with identical parameters; tracks and
landmarks of the two sensors never mix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy.ndimage import maximum_filter

from .errors import DegenerateGeometry

EVENT_SENSOR = 0
FRAME_SENSOR = 1

CANDIDATE = "candidate"
PERSISTENT = "persistent"
LOST = "lost"


@dataclass
class FrontendParams:
    fast_threshold: float = 50.0
    klt_levels: int = 2
    klt_patch: int = 24
    klt_max_iterations: int = 30
    klt_epsilon: float = 0.01
    klt_max_residual: float = 40.0
    klt_min_eigenvalue: float = 1e-3
    grid_cell: int = 32
    min_features: int = 40
    max_per_cell: int = 1
    detection_border: int = 8
    min_track_len: int = 3
    min_parallax_deg: float = 1.0
    reproj_threshold_px: float = 3.0
    kf_overlap: float = 0.7
    max_kf_gap: int = 5
    max_triangulation_obs: int = 8

    def __post_init__(self):
        if self.klt_levels < 1 or self.klt_patch < 4 or self.grid_cell < 1:
            raise ValueError("invalid tracker geometry")
        if self.min_track_len < 2:
            raise ValueError("min_track_len must be at least 2")


@dataclass
class Feature:
    sensor_id: int
    track_id: int
    pixel: np.ndarray
    status: str = CANDIDATE
    history: list = field(default_factory=list)  # [(frame index, pixel)]
    score: float = 0.0

    def observe(self, k, pixel):
        if self.history and k <= self.history[-1][0]:
            raise ValueError("observation frame indices must increase")
        self.pixel = np.asarray(pixel, dtype=float)
        self.history.append((k, self.pixel.copy()))

    @property
    def alive(self):
        return self.status != LOST


@dataclass
class Landmark:
    id: int
    sensor_id: int
    position: np.ndarray
    parallax_deg: float = 0.0
    reprojection_px: float = 0.0

    @property
    def key(self):
        return (self.sensor_id, self.id)


# --------------------------------------------------------------------------
# FAST-9
# --------------------------------------------------------------------------

CIRCLE = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ]
)  # (dx, dy), contiguous around the Bresenham circle of radius 3
ARC = 9


def _arc_min(d):
    """Minimum over every cyclic run of 9 circle samples, ``d`` shaped (16, ...)."""
    roll = lambda a, k: np.roll(a, -k, axis=0)  # noqa: E731
    m2 = np.minimum(d, roll(d, 1))
    m4 = np.minimum(m2, roll(m2, 2))
    m8 = np.minimum(m4, roll(m4, 4))
    return np.minimum(m8, roll(d, 8))


def fast_score(img):
    """FAST-9 score per pixel: the largest threshold at which the pixel is a corner.

    A pixel is a corner at threshold ``t`` when 9 contiguous circle pixels are
    all brighter than ``center + t`` or all darker than ``center - t``; the
    score is therefore ``max over arcs of min |difference|`` minus one.
    Border pixels get score -1.
    """
    I = np.asarray(img, dtype=np.int16)
    h, w = I.shape
    score = np.full((h, w), -1, dtype=np.int16)
    if h < 7 or w < 7:
        return score
    c = I[3 : h - 3, 3 : w - 3]
    d = np.stack([I[3 + dy : h - 3 + dy, 3 + dx : w - 3 + dx] for dx, dy in CIRCLE]) - c
    bright = _arc_min(d).max(axis=0)
    dark = _arc_min(-d).max(axis=0)
    score[3 : h - 3, 3 : w - 3] = np.maximum(bright, dark) - 1
    return score


def fast_corners(img, threshold=50.0, border=3, nms=True):
    """Corner pixels ``(n, 2)`` as ``(x, y)`` with their scores, strongest first."""
    score = fast_score(img).astype(np.int32)
    corner = score >= threshold
    if border > 3:
        corner[:border] = corner[-border:] = False
        corner[:, :border] = corner[:, -border:] = False
    if nms:
        masked = np.where(corner, score, -1)
        corner &= masked == maximum_filter(masked, size=3, mode="constant", cval=-1)
    ys, xs = np.nonzero(corner)
    s = score[ys, xs]
    order = np.lexsort((xs, ys, -s))
    return np.column_stack([xs[order], ys[order]]).astype(float), s[order].astype(float)


def detect_features(img, threshold, occupancy, existing=(), cell=32, max_per_cell=1, border=8):
    """New corners for grid cells that hold no live feature.

    ``occupancy`` is the grid shape ``(rows, cols)``; ``existing`` holds
    pixels of live features. Returns ``(pixels, scores)``, at most
    ``max_per_cell`` per empty cell, strongest first within each cell.
    """
    rows, cols = occupancy
    taken = np.zeros((rows, cols), dtype=bool)
    for p in existing:
        cx, cy = int(p[0] // cell), int(p[1] // cell)
        if 0 <= cy < rows and 0 <= cx < cols:
            taken[cy, cx] = True
    pts, scores = fast_corners(img, threshold, border=border)
    if len(pts) == 0:
        return pts, scores
    cx = (pts[:, 0] // cell).astype(int)
    cy = (pts[:, 1] // cell).astype(int)
    keep = []
    used = np.zeros((rows, cols), dtype=int)
    for i in range(len(pts)):  # already sorted by decreasing score
        if taken[cy[i], cx[i]] or used[cy[i], cx[i]] >= max_per_cell:
            continue
        used[cy[i], cx[i]] += 1
        keep.append(i)
    keep = np.array(keep, dtype=int)
    return pts[keep], scores[keep]


# --------------------------------------------------------------------------
# pyramidal inverse-compositional KLT
# --------------------------------------------------------------------------


def _half_sample(img):
    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    p = np.pad(img, 2, mode="edge")
    rows = sum(k[i] * p[:, i : i + img.shape[1]] for i in range(5))
    both = sum(k[i] * rows[i : i + img.shape[0], :] for i in range(5))
    return both[::2, ::2]


def _gradients(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return gx, gy


class ImagePyramid:
    """Level 0 at full resolution, each next level half-sampled."""

    def __init__(self, img, levels):
        base = np.asarray(img, dtype=np.float64)
        self.levels = [base]
        for _ in range(levels - 1):
            self.levels.append(_half_sample(self.levels[-1]))
        self.gradients = [_gradients(level) for level in self.levels]

    def __len__(self):
        return len(self.levels)


@numba.njit(cache=True)
def _sample_kernel(img, x, y, out):
    h, w = img.shape
    xmax = w - 1.000001
    ymax = h - 1.000001
    for i in range(x.size):
        xi = min(max(x[i], 0.0), xmax)
        yi = min(max(y[i], 0.0), ymax)
        x0 = int(xi)
        y0 = int(yi)
        ax = xi - x0
        ay = yi - y0
        out[i] = (
            img[y0, x0] * (1 - ax) * (1 - ay)
            + img[y0, x0 + 1] * ax * (1 - ay)
            + img[y0 + 1, x0] * (1 - ax) * ay
            + img[y0 + 1, x0 + 1] * ax * ay
        )


def _sample(img, x, y):
    """Bilinear samples at float coordinates (clamped to the image)."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    out = np.empty(x.shape)
    _sample_kernel(np.ascontiguousarray(img, dtype=np.float64), np.ascontiguousarray(x).ravel(), np.ascontiguousarray(y).ravel(), out.reshape(-1))
    return out


@dataclass
class KltResult:
    pixels: np.ndarray  # (n, 2)
    converged: np.ndarray  # (n,) bool
    residual: np.ndarray  # (n,) mean absolute zero-mean residual at level 0


def klt_track(prev, cur, points, params=None, guesses=None):
    """Track ``points`` from pyramid ``prev`` into pyramid ``cur``.

    ``guesses`` optionally gives initial positions in ``cur`` (e.g. predicted
    from inertial data); by default features start where they were.
    """
    params = params or FrontendParams()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return KltResult(np.empty((0, 2)), np.empty(0, bool), np.empty(0))
    levels = min(len(prev), len(cur))
    half = params.klt_patch / 2.0
    off = np.arange(params.klt_patch) - (params.klt_patch - 1) / 2.0
    ox, oy = np.meshgrid(off, off)
    ox, oy = ox.ravel(), oy.ravel()
    npx = ox.size

    est = pts.copy() if guesses is None else np.asarray(guesses, dtype=float).reshape(-1, 2).copy()
    ok = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    residual = np.full(n, np.inf)
    for lvl in range(levels - 1, -1, -1):
        scale = 0.5**lvl
        T_img = prev.levels[lvl]
        gx_img, gy_img = prev.gradients[lvl]
        I_img = cur.levels[lvl]
        h, w = I_img.shape
        tx = pts[:, :1] * scale + ox
        ty = pts[:, 1:] * scale + oy
        T = _sample(T_img, tx, ty)
        T -= T.mean(axis=1, keepdims=True)
        gx = _sample(gx_img, tx, ty)
        gy = _sample(gy_img, tx, ty)
        H = np.stack(
            [
                np.stack([(gx * gx).sum(1), (gx * gy).sum(1)], -1),
                np.stack([(gx * gy).sum(1), (gy * gy).sum(1)], -1),
            ],
            -2,
        )
        tr = H[:, 0, 0] + H[:, 1, 1]
        det = H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] ** 2
        min_eig = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4 * det, 0.0))) / npx
        ok &= min_eig > params.klt_min_eigenvalue
        Hinv = np.zeros_like(H)
        good = det > 0
        Hinv[good, 0, 0] = H[good, 1, 1] / det[good]
        Hinv[good, 1, 1] = H[good, 0, 0] / det[good]
        Hinv[good, 0, 1] = Hinv[good, 1, 0] = -H[good, 0, 1] / det[good]

        p = est * scale
        done = ~ok
        lvl_conv = np.zeros(n, dtype=bool)
        for _ in range(params.klt_max_iterations):
            act = ~done
            if not act.any():
                break
            I = _sample(I_img, p[act, :1] + ox, p[act, 1:] + oy)
            I -= I.mean(axis=1, keepdims=True)
            err = I - T[act]
            b = np.stack([(gx[act] * err).sum(1), (gy[act] * err).sum(1)], -1)
            delta = np.einsum("nij,nj->ni", Hinv[act], b)
            p[act] -= delta
            small = np.linalg.norm(delta, axis=1) < params.klt_epsilon
            idx = np.flatnonzero(act)
            lvl_conv[idx[small]] = True
            done[idx[small]] = True
            # a patch fully outside the image cannot recover
            far = (p[act, 0] < -half) | (p[act, 1] < -half) | (p[act, 0] > w - 1 + half) | (p[act, 1] > h - 1 + half)
            ok[idx[far]] = False
            done[idx[far]] = True
        est = p / scale
        if lvl == 0:
            converged = lvl_conv & ok
            I = _sample(I_img, est[:, :1] + ox, est[:, 1:] + oy)
            I -= I.mean(axis=1, keepdims=True)
            residual = np.abs(I - T).mean(axis=1)
    h, w = cur.levels[0].shape
    inside = (est[:, 0] >= 0) & (est[:, 1] >= 0) & (est[:, 0] <= w - 1) & (est[:, 1] <= h - 1)
    converged &= inside & (residual < params.klt_max_residual) & np.all(np.isfinite(est), axis=1)
    return KltResult(est, converged, residual)


# --------------------------------------------------------------------------
# triangulation
# --------------------------------------------------------------------------


@dataclass
class TriangulationQuality:
    parallax_deg: float
    reprojection_px: float
    accepted: bool


def triangulate_landmark(observations, cam, min_parallax_deg=1.0, reproj_threshold_px=3.0, normalized=None):
    """Linear (DLT) triangulation from ``[(pixel, T_WC), ...]``.

    Returns ``(point_W, quality)``. Raises :class:`DegenerateGeometry` when
    the camera centres coincide or the parallax is below the gate; a
    reprojection error above the gate or a point behind a camera yields
    ``quality.accepted = False``. ``normalized`` optionally supplies the
    undistorted normalized coordinates of the pixels.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("need at least two observations")
    pix = np.array([np.asarray(o[0], dtype=float) for o in observations])
    R_WC = np.array([o[1].R for o in observations])
    centers = np.array([o[1].translation for o in observations])
    if np.max(np.linalg.norm(centers - centers[0], axis=1)) < 1e-12:
        raise DegenerateGeometry("zero baseline")
    xn = cam.normalized(pix) if normalized is None else np.asarray(normalized, dtype=float)
    R_CW = R_WC.transpose(0, 2, 1)
    P = np.concatenate([R_CW, -(R_CW @ centers[:, :, None])], axis=2)
    A = np.empty((2 * len(pix), 4))
    A[0::2] = xn[:, 0:1] * P[:, 2] - P[:, 0]
    A[1::2] = xn[:, 1:2] * P[:, 2] - P[:, 1]
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise DegenerateGeometry("point at infinity")
    X = Xh[:3] / Xh[3]

    rays = np.concatenate([xn, np.ones((len(xn), 1))], axis=1)
    bearings = np.einsum("nij,nj->ni", R_WC, rays)
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
    cosines = np.clip(bearings @ bearings.T, -1.0, 1.0)
    parallax = math.degrees(float(np.arccos(cosines.min())))
    if parallax < min_parallax_deg:
        raise DegenerateGeometry(f"parallax {parallax:.3f} deg below gate")

    P_C = np.einsum("nij,nj->ni", R_CW, X - centers)
    uv, valid = cam.project_points(P_C)
    in_front = bool(np.all(valid))
    reproj = float(np.mean(np.linalg.norm(uv - pix, axis=1))) if in_front else math.inf
    accepted = in_front and reproj < reproj_threshold_px
    return X, TriangulationQuality(parallax, reproj, accepted)


def _spread(history, poses, limit):
    """At most ``limit`` observations with known poses, evenly spaced and keeping both ends."""
    usable = [(k, px) for k, px in history if k in poses]
    if len(usable) <= limit:
        return usable
    idx = np.unique(np.round(np.linspace(0, len(usable) - 1, limit)).astype(int))
    return [usable[i] for i in idx]


def promote_candidates(features, poses, cam, params=None, next_landmark=None):
    """Triangulate candidates with enough history; returns new landmarks.

    ``poses`` maps frame index to the camera pose ``T_WC`` of this sensor;
    observations in frames without a pose are ignored.
    """
    params = params or FrontendParams()
    jobs = []
    for f in features:
        if f.status != CANDIDATE:
            continue
        sel = _spread(f.history, poses, params.max_triangulation_obs)
        if len(sel) >= params.min_track_len:
            jobs.append((f, sel))
    if not jobs:
        return []
    # undistort every candidate pixel in one batch
    pix = np.array([px for _, sel in jobs for _, px in sel], dtype=float)
    xn_all = cam.normalized(pix)
    out = []
    offset = 0
    for f, sel in jobs:
        xn = xn_all[offset:offset + len(sel)]
        offset += len(sel)
        obs = [(px, poses[k]) for k, px in sel]
        try:
            X, q = triangulate_landmark(obs, cam, params.min_parallax_deg, params.reproj_threshold_px, normalized=xn)
        except DegenerateGeometry:
            continue
        if not q.accepted or not np.all(np.isfinite(X)):
            continue
        f.status = PERSISTENT
        out.append(Landmark(f.track_id, f.sensor_id, X, q.parallax_deg, q.reprojection_px))
    return out


def select_keyframe(current_ids, last_keyframe_ids, frames_since_keyframe, overlap=0.7, max_gap=5):
    """Overlap/gap keyframe rule.

    ``current_ids`` are persistent features tracked in the current frame,
    ``last_keyframe_ids`` those of the last keyframe (``None`` before the
    first keyframe).
    """
    if last_keyframe_ids is None:
        return True
    if frames_since_keyframe > max_gap:
        return True
    base = set(last_keyframe_ids)
    if not base:
        return True
    shared = len(base & set(current_ids))
    return shared / len(base) < overlap


# --------------------------------------------------------------------------
# per-sensor frontend
# --------------------------------------------------------------------------


class SensorFrontend:
    """Detect-and-track loop for one sensor."""

    def __init__(self, sensor_id, cam, params=None):
        self.sensor_id = sensor_id
        self.cam = cam
        self.params = params or FrontendParams()
        self.features = {}  # live features by track id
        self.pyramid = None
        self.next_id = 0
        self.last_frame = None
        cell = self.params.grid_cell
        self.grid = (int(math.ceil(cam.height / cell)), int(math.ceil(cam.width / cell)))

    def live(self):
        return list(self.features.values())

    def process(self, k, image, predict=None):
        """Track into frame ``k``, then top up with fresh detections.

        ``predict`` maps ``(n, 2)`` pixels of the previous frame to initial
        guesses in this frame. Returns the features lost in this frame.
        """
        if self.last_frame is not None and k <= self.last_frame:
            raise ValueError("frame indices must increase")
        pyr = ImagePyramid(image, self.params.klt_levels)
        lost = []
        if self.pyramid is not None and self.features:
            ids = list(self.features)
            pts = np.array([self.features[j].pixel for j in ids])
            guesses = None
            if predict is not None:
                guesses = np.asarray(predict(pts), dtype=float)
                bad = ~np.all(np.isfinite(guesses), axis=1)
                guesses[bad] = pts[bad]
            res = klt_track(self.pyramid, pyr, pts, self.params, guesses)
            for j, px, good in zip(ids, res.pixels, res.converged):
                f = self.features[j]
                if good:
                    f.observe(k, px)
                else:
                    f.status = LOST
                    lost.append(f)
                    del self.features[j]
        if len(self.features) < self.params.min_features:
            existing = [f.pixel for f in self.features.values()]
            pts, scores = detect_features(
                image,
                self.params.fast_threshold,
                self.grid,
                existing,
                self.params.grid_cell,
                self.params.max_per_cell,
                self.params.detection_border,
            )
            for px, s in zip(pts, scores):
                f = Feature(self.sensor_id, self.next_id, px, score=float(s))
                f.observe(k, px)
                self.features[self.next_id] = f
                self.next_id += 1
        self.pyramid = pyr
        self.last_frame = k
        return lost

    def drop(self, track_ids):
        for j in track_ids:
            f = self.features.pop(j, None)
            if f is not None:
                f.status = LOST

    def observations(self, k):
        """``{track_id: pixel}`` for live features observed in frame ``k``."""
        return {j: f.pixel for j, f in self.features.items() if f.history and f.history[-1][0] == k}
