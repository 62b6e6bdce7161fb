"""Per-frame estimator loop binding all modules.

Each frame: IMU prediction, motion-compensated event frame, tracking on
both sensors, landmark promotion, keyframe decision, window update and a
Levenberg-Marquardt solve. Modes only select which frontends contribute;
inertial terms are always present.
"""

from __future__ import annotations

import logging
import time
from bisect import bisect_right
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .backend import FrameRecord, OptimizationWindow, build_problem, manage_window, solve, write_back
from .config import PipelineConfig
from .dataset_io import Trajectory
from .errors import EmptyWindow, MissingData, NoVisibleLandmarks, NumericalFailure
from .frontend import EVENT_SENSOR, FRAME_SENSOR, SensorFrontend, promote_candidates, select_keyframe
from .imu import PoseTrack, imu_segment, propagate, static_initialize
from .synthesis import CameraTrack, median_scene_depth, synthesize_event_frame
from .windowing import event_rate, select_window

log = logging.getLogger(__name__)

DIAGNOSTIC_FIELDS = (
    "index",
    "t",
    "features_event",
    "features_frame",
    "landmarks",
    "event_rate",
    "zero_velocity",
    "keyframe",
    "iterations",
    "cost",
    "status",
)


@dataclass
class FrameDiagnostics:
    index: int
    t: float
    features_event: int = 0
    features_frame: int = 0
    landmarks: int = 0
    event_rate: float = float("nan")
    zero_velocity: bool = False
    keyframe: bool = False
    iterations: int = 0
    cost: float = float("nan")
    status: str = "ok"

    def row(self):
        return [getattr(self, k) for k in DIAGNOSTIC_FIELDS]


@dataclass
class RunResult:
    trajectory: Trajectory
    diagnostics: list
    summary: dict = field(default_factory=dict)


class _CameraPoses(Mapping):
    """Lazy ``frame index -> T_WC`` view over the state estimates."""

    def __init__(self, estimates, T_S_C):
        self._est = estimates
        self._T_S_C = T_S_C
        self._cache = {}

    def __getitem__(self, k):
        if k not in self._cache:
            self._cache[k] = self._est[k].T_WS @ self._T_S_C
        return self._cache[k]

    def __contains__(self, k):
        return k in self._est

    def __iter__(self):
        return iter(self._est)

    def __len__(self):
        return len(self._est)


class Estimator:
    """Fixed-lag visual-inertial estimator over one dataset's streams."""

    def __init__(self, calib, imu, events=None, config=None):
        self.config = config or PipelineConfig()
        cfg = self.config
        if cfg.gravity_mps2 is not None:
            calib = replace(calib, gravity_magnitude=cfg.gravity_mps2)
        self.calib = calib
        self.imu = imu
        self.events = events
        if cfg.uses_events and events is None:
            raise MissingData(f"mode {cfg.mode} needs an event stream")
        self.sensors = cfg.sensors
        self.frontends = {s: SensorFrontend(s, calib.camera(s), cfg.frontend) for s in self.sensors}
        self.window = OptimizationWindow(cfg.backend)
        self.estimates = {}  # frame index -> SensorState (final once dropped)
        self._times = []  # (t, index) of estimates, sorted
        self.last_kf_ids = None
        self.frames_since_kf = 0
        self.depth = cfg.fallback_depth
        self.diagnostics = []
        self.initial_state = None
        self._pool = None if cfg.single_activity or len(self.sensors) < 2 else ThreadPoolExecutor(max_workers=2)

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _store(self, k, state):
        if k not in self.estimates:
            self._times.append((state.t, k))
        self.estimates[k] = state

    def _anchor_before(self, t):
        """Latest estimated state at or before ``t`` (the earliest one otherwise)."""
        i = bisect_right(self._times, (t, float("inf")))
        return self.estimates[self._times[max(i - 1, 0)][1]]

    @property
    def latest(self):
        return self.window.frames[-1].state if self.window.frames else self.initial_state

    # ------------------------------------------------------------------
    # initialisation
    # ------------------------------------------------------------------

    def initialize(self, t_end=None):
        """Static initialisation from the leading IMU samples."""
        cfg = self.config
        t0 = float(self.imu.t[0])
        t_end = t0 + cfg.static_init_duration_s if t_end is None else t_end
        seg = imu_segment(self.imu, t0, t_end, cfg.max_imu_gap_s)
        self.initial_state = static_initialize(seg, self.calib.gravity_magnitude, cfg.static_variance_gate)
        # index -1 anchors event compensation before the first frame
        self._store(-1, self.initial_state)
        return self.initial_state

    # ------------------------------------------------------------------
    # per-frame helpers
    # ------------------------------------------------------------------

    def _scene_depth(self, T_WC, cam):
        if self.window.landmarks:
            try:
                return median_scene_depth(np.array(list(self.window.landmarks.values())), T_WC, cam)
            except NoVisibleLandmarks:
                pass
        return self.depth

    def _predictor(self, sensor, k_prev, pred, depth):
        """Pixel warp from the previous frame to the predicted current pose."""
        if k_prev is None:
            return None
        T_S_C = self.calib.T_S_C(sensor)
        cam = self.calib.camera(sensor)
        T_rel = (pred.T_WS @ T_S_C).inverse() @ (self.estimates[k_prev].T_WS @ T_S_C)

        def warp(px):
            P = cam.unproject(px, np.full(len(px), depth))
            uv, valid = cam.project_points(T_rel.apply(P))
            uv[~valid] = np.nan
            return uv

        return warp

    def _event_image(self, t, pred, diag):
        cfg = self.config
        try:
            win = select_window(self.events, t, cfg.event_window_size)
        except EmptyWindow:
            diag.status = "no_events"
            return None
        anchor = self._anchor_before(float(win.events.t[0]))
        track = PoseTrack(anchor, self.imu, t, self.calib.gravity_magnitude, cfg.max_imu_gap_s)
        cam = self.calib.event_camera
        depth = self._scene_depth(pred.T_WS @ self.calib.T_S_C0, cam)
        self.depth = depth
        frame = synthesize_event_frame(win, CameraTrack(track, self.calib.T_S_C0), depth, cam, cfg.c_sat)
        return frame.normalized

    # ------------------------------------------------------------------
    # main step
    # ------------------------------------------------------------------

    def process_frame(self, k, t, image=None):
        """Estimate the state at frame ``k`` (time ``t``); returns the optimised state."""
        cfg = self.config
        if self.initial_state is None:
            raise RuntimeError("estimator not initialised")
        diag = FrameDiagnostics(k, float(t))
        prev = self.latest
        k_prev = self.window.frames[-1].index if self.window.frames else None

        # (1) IMU prediction
        pred = propagate(prev, imu_segment(self.imu, prev.t, t, cfg.max_imu_gap_s), self.calib.gravity_magnitude)
        self._store(k, pred)

        # (2) tracking images
        images = {}
        if EVENT_SENSOR in self.sensors:
            img = self._event_image(t, pred, diag)
            if img is not None:
                images[EVENT_SENSOR] = img
        if FRAME_SENSOR in self.sensors and image is not None:
            images[FRAME_SENSOR] = image
        if self.events is not None and len(self.events):
            diag.event_rate = event_rate(self.events, t, cfg.no_motion_horizon_s)

        # (3) tracking, both sensors at once when allowed
        jobs = {}
        for s, img in images.items():
            depth = self._scene_depth(pred.T_WS @ self.calib.T_S_C(s), self.calib.camera(s))
            jobs[s] = (k, img, self._predictor(s, k_prev, pred, depth))
        if self._pool is not None and len(jobs) > 1:
            futures = {s: self._pool.submit(self.frontends[s].process, *args) for s, args in jobs.items()}
            lost = {s: f.result() for s, f in futures.items()}
        else:
            lost = {s: self.frontends[s].process(*args) for s, args in jobs.items()}
        dead = [(s, f.track_id) for s, fs in lost.items() for f in fs]

        # (4) promotion
        for s in jobs:
            fe = self.frontends[s]
            T_S_C = self.calib.T_S_C(s)
            poses = _CameraPoses(self.estimates, T_S_C)
            for lm in promote_candidates(fe.live(), poses, fe.cam, cfg.frontend):
                if not self.window.add_landmark((s, lm.id), lm.position):
                    fe.drop([lm.id])

        obs = {}
        for s in jobs:
            for j, px in self.frontends[s].observations(k).items():
                obs[(s, j)] = np.asarray(px, dtype=float)
        tracked = [key for key in obs if key in self.window.landmarks]
        diag.features_event = sum(1 for key in tracked if key[0] == EVENT_SENSOR)
        diag.features_frame = sum(1 for key in tracked if key[0] == FRAME_SENSOR)

        # (5) keyframe decision
        is_kf = select_keyframe(tracked, self.last_kf_ids, self.frames_since_kf, cfg.frontend.kf_overlap, cfg.frontend.max_kf_gap)
        if is_kf:
            self.last_kf_ids = tracked
            self.frames_since_kf = 0
        else:
            self.frames_since_kf += 1
        diag.keyframe = is_kf

        # (6) window update and solve
        zero_velocity = self.events is not None and diag.event_rate < cfg.no_motion_rate_threshold
        diag.zero_velocity = bool(zero_velocity)
        manage_window(self.window, FrameRecord(k, pred, is_kf, obs, diag.zero_velocity), is_kf, dead)
        gone = [key for key in self.window.retired if key[0] in self.frontends]
        for s, fe in self.frontends.items():
            fe.drop([j for (ss, j) in gone if ss == s])
        if len(self.window) >= 2:
            problem = build_problem(self.window, self.calib, self.imu, self.sensors, params=cfg.backend)
            diag.landmarks = len(problem.landmarks)
            try:
                report = solve(problem, cfg.backend)
            except NumericalFailure as exc:
                log.warning("frame %d: %s; keeping the prediction", k, exc)
                diag.status = "solver_failure"
            else:
                diag.iterations = report.iterations
                diag.cost = report.costs[-1]
                if all(s.is_finite() for s in problem.states):
                    write_back(self.window, problem)
                else:
                    diag.status = "solver_failure"
        for f in self.window.frames:
            self._store(f.index, f.state)
        if diag.features_event < cfg.frontend.min_features // 4 and diag.features_frame < cfg.frontend.min_features // 4:
            if diag.status == "ok":
                diag.status = "imu_only"
        self.diagnostics.append(diag)
        return self.window.frames[-1].state


def frame_schedule(dataset, config):
    """``(t, image or None)`` for every frame timestamp covered by the IMU."""
    t_imu_end = float(dataset.imu.t[-1])
    if dataset.frames:
        items = [(f.t, f.pixels if f.pixels.size else None) for f in dataset.frames]
    else:
        step = 1.0 / config.frame_rate
        n = int(np.floor((t_imu_end - float(dataset.imu.t[0])) / step + 1e-9)) + 1
        items = [(float(dataset.imu.t[0]) + i * step, None) for i in range(n)]
    return [(t, img) for t, img in items if t <= t_imu_end]


def run(dataset, config=None):
    """Run the estimator over a whole dataset; one pose per frame timestamp."""
    config = config or PipelineConfig()
    if config.uses_frames and dataset.frames is None:
        raise MissingData(f"mode {config.mode} needs intensity frames")
    if config.uses_frames and dataset.frames and not any(f.pixels.size for f in dataset.frames):
        raise MissingData(f"mode {config.mode} needs intensity frame images")
    events = dataset.events if dataset.events is not None and len(dataset.events) else None
    if config.uses_events and events is None:
        raise MissingData(f"mode {config.mode} needs an event stream")
    start = time.perf_counter()
    est = Estimator(dataset.calibration, dataset.imu, events, config)
    try:
        init = est.initialize()
        schedule = frame_schedule(dataset, config)
        times, poses = [], []
        k = 0
        for t, img in schedule:
            if t <= init.t:
                times.append(t)
                poses.append(init.T_WS)
                continue
            if not config.uses_frames:
                img = None
            est.process_frame(k, t, img)
            k += 1
        for i in range(k):
            st = est.estimates[i]
            times.append(st.t)
            poses.append(st.T_WS)
    finally:
        est.close()
    traj = Trajectory.from_poses(np.array(times), poses)
    diags = est.diagnostics
    summary = {
        "mode": config.mode,
        "seed": config.seed,
        "single_activity": config.single_activity,
        "frames": len(traj),
        "processed_frames": len(diags),
        "initialization_time": init.t,
        "imu_only_frames": sum(d.status == "imu_only" for d in diags),
        "solver_failures": sum(d.status == "solver_failure" for d in diags),
        "zero_velocity_frames": sum(d.zero_velocity for d in diags),
        "keyframes": sum(d.keyframe for d in diags),
        "runtime_s": time.perf_counter() - start,
    }
    return RunResult(traj, diags, summary)
