"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

The end-to-end criteria simulate full 10 s scenarios and run the estimator
several times, so this module dominates the suite's runtime.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from hybrid_vio.backend import (
    BackendParams,
    build_problem,
    reprojection_residual,
    solve,
    zero_velocity_jacobian,
    zero_velocity_prior,
)
from hybrid_vio.cli import EXIT_OK, main
from hybrid_vio.config import PipelineConfig
from hybrid_vio.dataset_io import (
    ImuArray,
    Trajectory,
    load_events,
    load_imu,
    read_trajectory,
    write_events,
    write_imu,
    write_trajectory,
)
from hybrid_vio.dataset_io import Event
from hybrid_vio.evaluation import evaluate, final_drift, relative_metrics, transform_trajectory
from hybrid_vio.frontend import triangulate_landmark
from hybrid_vio.geometry import CameraModel, Se3Transform, quat_exp, so3_exp
from hybrid_vio.imu import Preintegration, SensorState, imu_segment, inertial_error, propagate
from hybrid_vio.pipeline import run
from hybrid_vio.simulator import (
    NoiseSpec,
    Scene,
    TrajectorySpec,
    davis_camera,
    down_looking_extrinsics,
    generate_events,
    generate_imu,
    groundtruth,
    log_intensity,
    sample_trajectory,
    scenario,
    simulate,
)
from hybrid_vio.synthesis import motion_compensate_event

from helpers import ACCEPTANCE_RESULTS, random_pose, synthetic_window

G = 9.81
ECD_ENV = "HYBRID_VIO_ECD_DIR"


def record(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    assert ok, line


def rel_err(J, N):
    return float(np.linalg.norm(J - N) / max(np.linalg.norm(N), 1e-12))


def central_diff(f, x_dim, eps=1e-6):
    cols = []
    for k in range(x_dim):
        d = np.zeros(x_dim)
        d[k] = eps
        cols.append((f(d) - f(-d)) / (2 * eps))
    return np.column_stack(cols)


# --------------------------------------------------------------------------
# 1. Jacobians
# --------------------------------------------------------------------------


def test_criterion_1_jacobians_match_finite_differences():
    rng = np.random.default_rng(101)
    calib = scenario("circle").calibration()
    start = time.perf_counter()
    worst = {"reprojection_event": 0.0, "reprojection_frame": 0.0, "inertial": 0.0, "zero_velocity": 0.0}
    n = 100
    for i in range(n):
        state = SensorState(0.0, random_pose(rng), rng.normal(size=3), rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1)
        for sensor, name in ((0, "reprojection_event"), (1, "reprojection_frame")):
            cam, T_S_C = calib.camera(sensor), calib.T_S_C(sensor)
            X_C = cam.unproject(rng.uniform([10, 10], [230, 170]), rng.uniform(0.5, 4.0))
            X_W = (state.T_WS @ T_S_C).apply(X_C)
            z = cam.project(X_C) + rng.normal(size=2)
            _, J, Jl = reprojection_residual(state, T_S_C, cam, X_W, z)
            N = central_diff(lambda d: reprojection_residual(state.retract(d), T_S_C, cam, X_W, z)[0], 15)
            Nl = central_diff(lambda d: reprojection_residual(state, T_S_C, cam, X_W + d, z)[0], 3)
            worst[name] = max(worst[name], rel_err(J, N), rel_err(Jl, Nl))

        m = 101
        t = np.arange(m) / 1000.0
        imu = ImuArray(t, rng.normal([0, 0, G], 1.0, (m, 3)), rng.normal(0, 0.5, (m, 3)))
        seg = imu_segment(imu, 0.0, 0.1)
        b = propagate(state, seg, G).retract(rng.normal(0, 0.05, 15))
        pre = Preintegration(seg, state.bg, state.ba)
        _, Ja, Jb = inertial_error(pre, state, b, G)
        Na = central_diff(lambda d: inertial_error(pre, state.retract(d), b, G, False), 15)
        Nb = central_diff(lambda d: inertial_error(pre, state, b.retract(d), G, False), 15)
        worst["inertial"] = max(worst["inertial"], rel_err(Ja, Na), rel_err(Jb, Nb))

        Jz = zero_velocity_jacobian(state)
        Nz = central_diff(lambda d: zero_velocity_prior(state.retract(d))[0], 15)
        worst["zero_velocity"] = max(worst["zero_velocity"], rel_err(Jz, Nz))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, ok, f"{n} instances; worst relative error {detail}; {elapsed:.1f} s (< 10 s)")


# --------------------------------------------------------------------------
# 2. oracle equivalence
# --------------------------------------------------------------------------


def _look_at(center, target, rng):
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    x = np.cross(rng.normal(size=3), z)
    x /= np.linalg.norm(x)
    return Se3Transform.from_rt(np.column_stack([x, np.cross(z, x), z]), center)


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(202)
    cam = davis_camera()
    tri_err = 0.0
    for _ in range(50):
        X = rng.uniform([-0.5, -0.5, 1.5], [0.5, 0.5, 3.0])
        c0, c1 = rng.normal(scale=0.05, size=3), np.array([0.3, 0.0, 0.0]) + rng.normal(scale=0.05, size=3)
        poses = [_look_at(c, X + rng.normal(scale=0.1, size=3), rng) for c in (c0, c1)]
        obs = [(cam.project(T.inverse().apply(X)), T) for T in poses]
        Y, _ = triangulate_landmark(obs, cam, min_parallax_deg=0.0)
        # closest point of the two back-projected rays
        d = [T.R @ np.append(cam.normalized(px), 1.0) for px, T in obs]
        s = np.linalg.lstsq(np.column_stack([d[0], -d[1]]), poses[1].translation - poses[0].translation, rcond=None)[0]
        oracle = 0.5 * (poses[0].translation + s[0] * d[0] + poses[1].translation + s[1] * d[1])
        tri_err = max(tri_err, float(np.linalg.norm(Y - oracle)))

    # constant body rate with a world-constant acceleration has a closed form
    imu_err = 0.0
    for _ in range(10):
        w = rng.normal(size=3)
        a_w = rng.normal(size=3)
        start = SensorState(0.0, random_pose(rng), rng.normal(size=3))
        T_end = 2.0
        t = np.arange(int(T_end * 1000) + 1) / 1000.0
        R = start.T_WS.R @ so3_exp(t[:, None] * w)
        f_body = np.einsum("nji,j->ni", R, a_w - np.array([0.0, 0.0, -G]))
        imu = ImuArray(t, f_body, np.tile(w, (len(t), 1)))
        end = propagate(start, imu_segment(imu, 0.0, T_end), G)
        p_exact = start.T_WS.translation + start.v * T_end + 0.5 * a_w * T_end**2
        imu_err = max(imu_err, float(np.linalg.norm(end.T_WS.translation - p_exact)), float(np.linalg.norm(end.v - (start.v + a_w * T_end))))

    pinhole = CameraModel(width=240, height=180, fx=199.0, fy=198.0, cx=120.0, cy=90.0)
    comp_err = 0.0
    for _ in range(200):
        T_tk_ti = Se3Transform(quat_exp(rng.normal(scale=0.02, size=3)), rng.normal(scale=0.02, size=3))
        x, y = int(rng.integers(20, 220)), int(rng.integers(20, 160))
        depth = float(rng.uniform(0.5, 3.0))
        uv, _ = motion_compensate_event(Event(0.0, x, y, 1), T_tk_ti, depth, pinhole)
        P = T_tk_ti.apply(depth * np.array([(x - 120.0) / 199.0, (y - 90.0) / 198.0, 1.0]))
        exact = np.array([199.0 * P[0] / P[2] + 120.0, 198.0 * P[1] / P[2] + 90.0])
        comp_err = max(comp_err, float(np.linalg.norm(uv - exact)))
    ok = tri_err < 1e-6 and imu_err < 1e-6 and comp_err < 1e-6
    record(2, ok, f"triangulation {tri_err:.1e} m, propagation {imu_err:.1e}, compensation {comp_err:.1e} px (all < 1e-6)")


# --------------------------------------------------------------------------
# 3. simulator self-consistency
# --------------------------------------------------------------------------


def test_criterion_3_simulator_self_consistency():
    spec = TrajectorySpec("circle", duration=5.0, static_time=0.5, ramp_time=1.0)
    imu, _ = generate_imu(spec, NoiseSpec())
    s0 = sample_trajectory(spec, 0.0)
    end = propagate(SensorState(0.0, s0.pose, s0.velocity), imu_segment(imu, 0.0, 5.0))
    imu_err = float(np.linalg.norm(end.T_WS.translation - sample_trajectory(spec, 5.0).position))

    scene = Scene(seed=7)
    cam = davis_camera()
    T_S_C = down_looking_extrinsics()
    short = TrajectorySpec("circle", duration=0.4)
    C = 0.3
    events = generate_events(scene, short, cam, NoiseSpec(contrast_threshold=C), T_S_C=T_S_C)
    L0 = log_intensity(scene, short, cam, 0.0, T_S_C)
    recon_err = 0.0
    for t_end in (0.1, 0.2, 0.4):
        sel = events.t <= t_end + 1e-12
        net = np.zeros(L0.shape)
        np.add.at(net, (events.y[sel], events.x[sel]), events.polarity[sel])
        change = log_intensity(scene, short, cam, t_end, T_S_C) - L0
        recon_err = max(recon_err, float(np.max(np.abs(change - C * net))))
    ok = imu_err < 1e-4 and recon_err < C and len(events) > 1000
    record(3, ok, f"IMU drift over 5 s {imu_err:.1e} m (< 1e-4); max log-intensity residual {recon_err:.6f} (< C = {C})")


# --------------------------------------------------------------------------
# end-to-end scenarios (shared by criteria 4 and 5)
# --------------------------------------------------------------------------

_CACHE = {}


def _dataset(name):
    if name not in _CACHE:
        _CACHE[name] = simulate(scenario(name))
    return _CACHE[name]


def _run(name, mode):
    key = (name, mode)
    if key not in _CACHE:
        _CACHE[key] = run(_dataset(name), PipelineConfig(mode=mode, single_activity=True))
    return _CACHE[key]


def test_criterion_4_circle_end_to_end():
    ds = _dataset("circle")
    res = _run("circle", "fr+e+i")
    report = evaluate(res.trajectory, ds.groundtruth)
    runtime = res.summary["runtime_s"]
    ok = report.mean_position_error_pct < 1.0 and runtime < 60.0
    record(
        4,
        ok,
        f"circle fr+e+i mean position error {report.mean_position_error_pct:.3f}% of "
        f"{report.traveled_distance_m:.1f} m (< 1.0%); runtime {runtime:.1f} s (< 60 s)",
    )


BOUNDED_PCT = 10.0


def test_criterion_5a_blackout_ordering():
    ds = _dataset("blackout")
    err = {}
    for mode in ("fr+e+i", "e+i", "fr+i"):
        res = _run("blackout", mode)
        try:
            err[mode] = evaluate(res.trajectory, ds.groundtruth).mean_position_error_pct
        except Exception:  # a diverged run cannot be scored; count it as unbounded
            err[mode] = math.inf
    bounded = all(math.isfinite(err[m]) and err[m] < BOUNDED_PCT for m in ("fr+e+i", "e+i"))
    ratio = err["fr+i"] / max(err["fr+e+i"], err["e+i"])
    ok = bounded and ratio >= 2.0
    record(
        "5a",
        ok,
        f"blackout errors fr+e+i {err['fr+e+i']:.2f}%, e+i {err['e+i']:.2f}% (bounded < {BOUNDED_PCT:g}%), "
        f"fr+i {err['fr+i']:.2f}% = {ratio:.1f}x (>= 2x)",
    )


def test_criterion_5b_hover_drift_ordering():
    ds = _dataset("hover")
    drift = {}
    for mode in ("fr+e+i", "e+i", "fr+i"):
        res = _run("hover", mode)
        drift[mode] = final_drift(res.trajectory, ds.groundtruth, res.summary["initialization_time"])
    ok = drift["fr+e+i"] <= drift["e+i"] and drift["fr+i"] <= drift["e+i"]
    record(
        "5b",
        ok,
        f"hover final drift fr+e+i {drift['fr+e+i']:.3f} m, fr+i {drift['fr+i']:.3f} m, e+i {drift['e+i']:.3f} m "
        "(both <= e+i)",
    )


# --------------------------------------------------------------------------
# 6. evaluation protocol
# --------------------------------------------------------------------------


def test_criterion_6_evaluation_protocol():
    rng = np.random.default_rng(606)
    gt = groundtruth(TrajectorySpec("circle", duration=10.0, static_time=0.5, ramp_time=1.0))
    est = Trajectory(gt.t[::4], gt.positions[::4] + rng.normal(scale=0.02, size=gt.positions[::4].shape), gt.quaternions[::4])
    ref = evaluate(est, gt)
    change = 0.0
    for _ in range(10):
        moved = evaluate(transform_trajectory(random_pose(rng, scale=10.0), est), gt)
        change = max(
            change,
            abs(moved.mean_position_error_pct - ref.mean_position_error_pct),
            abs(moved.mean_yaw_error_deg_per_m - ref.mean_yaw_error_deg_per_m),
            *(float(np.max(np.abs(a.translation_pct - b.translation_pct), initial=0.0)) for a, b in zip(moved.relative, ref.relative)),
        )

    g = gt.positions[::4]
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(g, axis=0), axis=1))])
    direction = np.array([0.6, 0.8, 0.0])
    drifted = Trajectory(est.t, g + 0.01 * cum[:, None] * direction, est.quaternions)
    medians = {s.length: float(np.median(s.translation_pct)) for s in relative_metrics(drifted, gt)}
    worst = max(abs(m - 1.0) for m in medians.values())
    ok = change < 1e-9 and worst < 0.1 and len(medians) == 5
    record(
        6,
        ok,
        f"max metric change under rigid transforms {change:.1e} (< 1e-9); injected 1%/m drift medians "
        + ", ".join(f"{L:g} m {m:.3f}%" for L, m in medians.items())
        + " (within 0.1 pp)",
    )


# --------------------------------------------------------------------------
# 7. determinism
# --------------------------------------------------------------------------


def test_criterion_7_cli_runs_are_byte_identical(short_circle, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["run", "--dataset", str(short_circle), "--out", str(out), "--single-activity"])
        assert code == EXIT_OK
        outs.append((out / "trajectory.txt").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    record(7, ok, f"two single-activity runs, trajectory files {len(outs[0])} bytes, identical={outs[0] == outs[1]}")


# --------------------------------------------------------------------------
# 8. Event Camera Dataset conformance
# --------------------------------------------------------------------------


def test_criterion_8_event_camera_dataset_round_trip(tmp_path):
    root = os.environ.get(ECD_ENV)
    if not root or not Path(root).is_dir():
        ACCEPTANCE_RESULTS.append(f"criterion 8: SKIPPED (set {ECD_ENV} to an Event Camera Dataset sequence directory)")
        pytest.skip(f"{ECD_ENV} not set; real sequence unavailable")
    root = Path(root)
    events = load_events(root / "events.txt")
    imu = load_imu(root / "imu.txt")
    gt = read_trajectory(root / "groundtruth.txt")
    write_events(tmp_path / "events.txt", events)
    write_imu(tmp_path / "imu.txt", imu)
    write_trajectory(tmp_path / "groundtruth.txt", gt)
    ev2 = load_events(tmp_path / "events.txt")
    imu2 = load_imu(tmp_path / "imu.txt")
    gt2 = read_trajectory(tmp_path / "groundtruth.txt")
    tol = 1e-9 * (1 + 1e-6)
    errs = {
        "event t": float(np.max(np.abs(ev2.t - events.t))),
        "imu": float(max(np.max(np.abs(imu2.t - imu.t)), np.max(np.abs(imu2.accel - imu.accel)), np.max(np.abs(imu2.gyro - imu.gyro)))),
        "groundtruth": float(max(np.max(np.abs(gt2.t - gt.t)), np.max(np.abs(gt2.positions - gt.positions)))),
    }
    exact = np.array_equal(ev2.x, events.x) and np.array_equal(ev2.y, events.y) and np.array_equal(ev2.polarity, events.polarity)
    ok = exact and all(v <= tol + 1e-12 * max(1.0, float(np.max(np.abs(events.t)))) for v in errs.values())
    record(8, ok, f"{len(events)} events, {len(imu)} IMU samples, {len(gt)} poses; max round-trip error " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


# --------------------------------------------------------------------------
# 9. LM solver contract
# --------------------------------------------------------------------------


def test_criterion_9_lm_monotone_and_gauge_frozen():
    rng = np.random.default_rng(909)
    violations, gauge_moved, improved = 0, 0, 0
    n = 50
    for i in range(n):
        window, calib, imu, _, _ = synthetic_window(
            rng,
            n_frames=int(rng.integers(3, 8)),
            n_landmarks=int(rng.integers(8, 30)),
            noise_px=float(rng.uniform(0.0, 1.0)),
            perturb=float(rng.uniform(0.2, 1.5)),
            sensors=((0, 1), (0,), (1,))[i % 3],
        )
        p = build_problem(window, calib, imu, zero_velocity=bool(i % 5 == 0))
        fixed = sorted(p.fixed_pose)
        before = [(p.states[j].T_WS.rotation.tobytes(), p.states[j].T_WS.translation.tobytes()) for j in fixed]
        report = solve(p, BackendParams(lm_max_iterations=20))
        violations += sum(b > a for a, b in zip(report.costs, report.costs[1:]))
        after = [(p.states[j].T_WS.rotation.tobytes(), p.states[j].T_WS.translation.tobytes()) for j in fixed]
        gauge_moved += before != after
        improved += report.final_cost < report.initial_cost
    ok = violations == 0 and gauge_moved == 0
    record(9, ok, f"{n} windows: {violations} cost increases, {gauge_moved} gauge blocks changed, {improved} reduced cost")
