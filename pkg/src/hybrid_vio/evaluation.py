"""Trajectory evaluation: rigid alignment, absolute drift and segment errors.

The estimate is aligned once to ground truth with a rigid transform fitted
on a fixed time sub-segment, then absolute position and yaw errors are
normalised by the travelled distance. Relative errors are measured on
sub-trajectories of fixed path length, each aligned at its first pose.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import Trajectory
from .errors import InsufficientOverlap, SegmentTooLong, ZeroTraveledDistance
from .geometry import Se3Transform, quat_conj, quat_log, quat_mul, quat_to_rot, slerp

MIN_MATCHED_POSES = 10
DEFAULT_SEGMENT_LENGTHS = (1.0, 2.0, 3.0, 4.0, 5.0)
DEFAULT_START_SPACING = 0.2


@dataclass(frozen=True)
class AlignmentSpec:
    t_start: float = 3.0
    t_end: float = 8.0

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError("alignment window must have t_end > t_start")


@dataclass
class SegmentErrors:
    """Per-start errors for one segment length."""

    length: float
    translation_pct: np.ndarray
    rotation_deg: np.ndarray

    def summary(self):
        def stats(x):
            if x.size == 0:
                return {"median": None, "q1": None, "q3": None, "count": 0}
            q1, med, q3 = np.percentile(x, [25, 50, 75])
            return {"median": float(med), "q1": float(q1), "q3": float(q3), "count": int(x.size)}

        return {"length_m": self.length, "translation_pct": stats(self.translation_pct), "rotation_deg": stats(self.rotation_deg)}


@dataclass
class MetricReport:
    mean_position_error_pct: float
    mean_yaw_error_deg_per_m: float
    traveled_distance_m: float
    alignment: Se3Transform
    relative: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mean_position_error_pct": self.mean_position_error_pct,
            "mean_yaw_error_deg_per_m": self.mean_yaw_error_deg_per_m,
            "traveled_distance_m": self.traveled_distance_m,
            "alignment": {
                "rotation_xyzw": [float(v) for v in self.alignment.rotation],
                "translation": [float(v) for v in self.alignment.translation],
            },
            "relative": [s.summary() for s in self.relative],
        }


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------


def interpolate_poses(traj, times):
    """Positions and quaternions of ``traj`` at ``times`` (inside its span)."""
    times = np.asarray(times, dtype=float)
    if len(traj) < 2:
        raise InsufficientOverlap("trajectory needs at least two poses to interpolate")
    i = np.clip(np.searchsorted(traj.t, times, side="right"), 1, len(traj) - 1)
    t0, t1 = traj.t[i - 1], traj.t[i]
    w = np.clip((times - t0) / (t1 - t0), 0.0, 1.0)
    p = (1 - w)[:, None] * traj.positions[i - 1] + w[:, None] * traj.positions[i]
    q = slerp(traj.quaternions[i - 1], traj.quaternions[i], w)
    return p, q


def match(est, gt):
    """Ground truth interpolated to the estimate timestamps it covers.

    Returns ``(est_subset, gt_matched)`` as trajectories on identical times.
    """
    if len(gt) < 2 or len(est) == 0:
        raise InsufficientOverlap("empty trajectory")
    keep = (est.t >= gt.t[0]) & (est.t <= gt.t[-1])
    times = est.t[keep]
    p, q = interpolate_poses(gt, times)
    return Trajectory(times, est.positions[keep], est.quaternions[keep]), Trajectory(times, p, q)


def transform_trajectory(T, traj):
    """Left-apply ``T`` to every pose of ``traj``."""
    p = traj.positions @ T.R.T + T.translation
    q = quat_mul(np.broadcast_to(T.rotation, traj.quaternions.shape), traj.quaternions)
    return Trajectory(traj.t.copy(), p, q)


# --------------------------------------------------------------------------
# alignment
# --------------------------------------------------------------------------


def _umeyama(src, dst):
    """Rigid ``(R, t)`` minimising ``sum |R src + t - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def align_se3(est, gt, spec=AlignmentSpec()):
    """Rigid transform taking the estimate onto ground truth.

    Fitted only on estimate poses inside ``[spec.t_start, spec.t_end]``.
    """
    e, g = match(est, gt)
    sel = (e.t >= spec.t_start) & (e.t <= spec.t_end)
    if int(sel.sum()) < MIN_MATCHED_POSES:
        raise InsufficientOverlap(
            f"only {int(sel.sum())} matched poses in [{spec.t_start}, {spec.t_end}] s (need {MIN_MATCHED_POSES})"
        )
    R, t = _umeyama(e.positions[sel], g.positions[sel])
    return Se3Transform.from_rt(R, t)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def path_length(positions):
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))


def traveled_distance(gt, t0=None, t1=None):
    """Ground-truth path length over ``[t0, t1]`` from its own dense samples."""
    t0 = gt.t[0] if t0 is None else max(t0, gt.t[0])
    t1 = gt.t[-1] if t1 is None else min(t1, gt.t[-1])
    if t1 <= t0:
        return 0.0
    inner = (gt.t > t0) & (gt.t < t1)
    ends_p, _ = interpolate_poses(gt, [t0, t1])
    pts = np.vstack([ends_p[:1], gt.positions[inner], ends_p[1:]])
    return path_length(pts)


def _yaw_errors_deg(q_est, q_gt):
    dq = quat_mul(quat_conj(q_gt), q_est)
    R = quat_to_rot(dq)
    return np.degrees(np.abs(np.arctan2(R[..., 1, 0], R[..., 0, 0])))


def absolute_metrics(est_aligned, gt):
    """``(mean position error % of distance, mean yaw error deg/m)``."""
    e, g = match(est_aligned, gt)
    if len(e) == 0:
        raise InsufficientOverlap("no estimate pose inside the ground-truth span")
    dist = traveled_distance(gt, e.t[0], e.t[-1])
    if dist <= 1e-9:
        raise ZeroTraveledDistance("ground truth does not move over the evaluated span")
    pos = float(np.mean(np.linalg.norm(e.positions - g.positions, axis=1)))
    yaw = float(np.mean(_yaw_errors_deg(e.quaternions, g.quaternions)))
    return 100.0 * pos / dist, yaw / dist


def final_drift(est, gt, t_anchor=None):
    """Position error of the last estimate pose after aligning the pose at ``t_anchor``.

    The estimate is rigidly moved so its first pose at or after ``t_anchor``
    coincides with ground truth; no fit over the trajectory is involved.
    """
    e, g = match(est, gt)
    if len(e) == 0:
        raise InsufficientOverlap("no estimate pose inside the ground-truth span")
    i0 = 0 if t_anchor is None else int(np.searchsorted(e.t, t_anchor - 1e-9))
    if i0 >= len(e):
        raise InsufficientOverlap(f"no estimate pose after t={t_anchor}")
    T = g.pose(i0) @ e.pose(i0).inverse()
    return float(np.linalg.norm(T.apply(e.positions[-1]) - g.positions[-1]))


def relative_metrics(est, gt, segment_lengths=DEFAULT_SEGMENT_LENGTHS, start_spacing=DEFAULT_START_SPACING):
    """Endpoint errors of fixed-length sub-trajectories.

    Each segment is aligned by matching the estimate's start pose to ground
    truth; lengths exceeding the path are skipped with a warning.
    """
    e, g = match(est, gt)
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(g.positions, axis=0), axis=1))])
    total = float(cum[-1]) if len(cum) else 0.0
    starts = []
    next_d = 0.0
    for i, d in enumerate(cum):
        if d >= next_d:
            starts.append(i)
            next_d = d + start_spacing
    out = []
    for L in segment_lengths:
        if L <= 0:
            raise ValueError("segment lengths must be positive")
        if L > total:
            warnings.warn(str(SegmentTooLong(f"segment length {L} m exceeds path length {total:.3f} m")))
            out.append(SegmentErrors(float(L), np.empty(0), np.empty(0)))
            continue
        trans, rot = [], []
        for i in starts:
            j = int(np.searchsorted(cum, cum[i] + L, side="left"))
            if j >= len(cum):
                break
            Ge_i, Gg_i = e.pose(i), g.pose(i)
            Ge_j, Gg_j = e.pose(j), g.pose(j)
            T_local = Gg_i @ Ge_i.inverse()
            E_j = T_local @ Ge_j
            trans.append(100.0 * np.linalg.norm(E_j.translation - Gg_j.translation) / L)
            dq = quat_mul(quat_conj(Gg_j.rotation), E_j.rotation)
            rot.append(math.degrees(float(np.linalg.norm(quat_log(dq)))))
        out.append(SegmentErrors(float(L), np.asarray(trans), np.asarray(rot)))
    return out


def evaluate(est, gt, spec=AlignmentSpec(), segment_lengths=DEFAULT_SEGMENT_LENGTHS):
    """Full protocol: align, absolute metrics, relative metrics."""
    T = align_se3(est, gt, spec)
    aligned = transform_trajectory(T, est)
    pos, yaw = absolute_metrics(aligned, gt)
    e, _ = match(aligned, gt)
    dist = traveled_distance(gt, e.t[0], e.t[-1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rel = relative_metrics(est, gt, segment_lengths)
    return MetricReport(pos, yaw, dist, T, rel)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

REPORT_KEYS = ("mean_position_error_pct", "mean_yaw_error_deg_per_m", "traveled_distance_m", "alignment", "relative")


def write_report_json(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate_report_dict(d):
    """Check a parsed report against the documented layout; raises ``ValueError``."""
    missing = [k for k in REPORT_KEYS if k not in d]
    if missing:
        raise ValueError(f"report misses keys {missing}")
    for k in REPORT_KEYS[:3]:
        if not isinstance(d[k], (int, float)) or d[k] < 0:
            raise ValueError(f"{k} must be a non-negative number")
    a = d["alignment"]
    if len(a.get("rotation_xyzw", [])) != 4 or len(a.get("translation", [])) != 3:
        raise ValueError("alignment must hold a quaternion and a translation")
    for seg in d["relative"]:
        if set(seg) != {"length_m", "translation_pct", "rotation_deg"}:
            raise ValueError("malformed relative entry")


def write_segments_csv(path, report):
    """One row per (segment length, start) pair."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["length_m", "index", "translation_pct", "rotation_deg"])
        for seg in report.relative:
            for i, (tr, ro) in enumerate(zip(seg.translation_pct, seg.rotation_deg)):
                w.writerow([f"{seg.length:g}", i, f"{tr:.9g}", f"{ro:.9g}"])


def write_outputs(out_dir, report):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(out_dir / "metrics.json", report)
    write_segments_csv(out_dir / "segments.csv", report)
