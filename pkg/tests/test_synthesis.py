import numpy as np
import pytest

from hybrid_vio.dataset_io import Event, EventArray
from hybrid_vio.errors import BehindCamera, EmptyWindow, NoVisibleLandmarks
from hybrid_vio.geometry import CameraModel, Se3Transform, se3_exp
from hybrid_vio.simulator import (
    NoiseSpec,
    Scene,
    TrajectorySpec,
    davis_camera,
    down_looking_extrinsics,
    generate_events,
    sample_trajectory,
)
from hybrid_vio.synthesis import (
    accumulate_events,
    compensate_events,
    median_scene_depth,
    motion_compensate_event,
    splat,
    synthesize_event_frame,
)
from hybrid_vio.windowing import EventWindow, select_window


def identity_pose(t):
    return Se3Transform.identity()


def test_median_depth_examples(pinhole_camera):
    T = Se3Transform.identity()
    assert median_scene_depth([[0, 0, 1], [0, 0, 2], [0, 0, 9]], T, pinhole_camera) == 2.0
    assert median_scene_depth([[0.1, 0, 4]], T, pinhole_camera) == 4.0
    assert median_scene_depth([[0, 0, -1], [0, 0, 3], [0, 0, 4]], T, pinhole_camera) == 3.5
    with pytest.raises(NoVisibleLandmarks):
        median_scene_depth([[0, 0, -1]], T, pinhole_camera)
    with pytest.raises(NoVisibleLandmarks):
        median_scene_depth(np.empty((0, 3)), T, pinhole_camera)


def test_median_depth_matches_brute_force(davis_camera, rng):
    P = rng.uniform([-3, -3, -2], [3, 3, 6], (200, 3))
    T_WC = se3_exp(rng.normal(size=6) * 0.1)
    P_C = T_WC.inverse().apply(P)
    keep = []
    for q in P_C:
        if q[2] > 0:
            uv = davis_camera.project(q)
            if 0 <= uv[0] <= davis_camera.width - 1 and 0 <= uv[1] <= davis_camera.height - 1:
                keep.append(q[2])
    assert median_scene_depth(P, T_WC, davis_camera) == pytest.approx(np.median(keep), abs=1e-12)


def test_identity_compensation(davis_camera):
    uv, inside = motion_compensate_event(Event(0.0, 37, 121, 1), Se3Transform.identity(), 2.0, davis_camera)
    np.testing.assert_allclose(uv, [37, 121], atol=1e-6)
    assert inside


def test_translation_shift_matches_pinhole(pinhole_camera):
    # camera moved +0.1 m in x between t_i and t_k; the point appears 10 px to the left
    T_tk_ti = Se3Transform.from_rt(np.eye(3), [-0.1, 0.0, 0.0])
    uv, inside = motion_compensate_event(Event(0.0, 120, 90, 1), T_tk_ti, 1.0, pinhole_camera)
    np.testing.assert_allclose(uv, [110.0, 90.0], atol=1e-9)
    uv, _ = motion_compensate_event(Event(0.0, 50, 30, 1), T_tk_ti, 1.0, pinhole_camera)
    np.testing.assert_allclose(uv, [40.0, 30.0], atol=1e-9)


def test_large_rotation_never_crashes(davis_camera):
    T = se3_exp([0.0, 3.0, 0.0, 0.0, 0.0, 0.0])
    with pytest.raises(BehindCamera):
        motion_compensate_event(Event(0.0, 0, 0, 1), T, 1.0, davis_camera)
    uv, inside = motion_compensate_event(Event(0.0, 0, 0, 1), se3_exp([0, 1.2, 0, 0, 0, 0]), 1.0, davis_camera)
    assert not inside


def _window(t, x, y, frame_time=None):
    ev = EventArray(np.asarray(t, float), x, y, np.ones(len(t)))
    return EventWindow(frame_time if frame_time is not None else float(ev.t[-1]) + 1e-3, ev, 0, len(ev), len(ev))


def test_static_single_pixel_saturates(davis_camera):
    w = _window(np.linspace(0, 0.01, 20), np.full(20, 50), np.full(20, 60))
    frame = synthesize_event_frame(w, identity_pose, 1.0, davis_camera, c_sat=3)
    assert frame.n_in_bounds == 20
    assert frame.counts[60, 50] == 20
    assert frame.normalized[60, 50] == 255
    assert np.count_nonzero(frame.normalized) == 1


def test_all_out_of_bounds(pinhole_camera):
    w = _window([0.0, 0.0], [5, 230], [5, 170], frame_time=0.01)

    def pose(t):
        return Se3Transform.identity() if t < 0.005 else Se3Transform.from_rt(np.eye(3), [5.0, 0, 0])

    frame = synthesize_event_frame(w, pose, 1.0, pinhole_camera)
    assert frame.n_in_bounds == 0
    assert not frame.normalized.any()


def test_empty_window_propagates(davis_camera):
    with pytest.raises(EmptyWindow):
        select_window(EventArray.empty(), 1.0, 10)
    with pytest.raises(EmptyWindow):
        synthesize_event_frame(_window([], [], [], frame_time=1.0), identity_pose, 1.0, davis_camera)


def test_bilinear_mass_conservation(rng):
    uv = rng.uniform([-5, -5], [245, 185], (5000, 2))
    counts, n_in = splat(uv, 240, 180)
    assert abs(counts.sum() - n_in) < 1e-9
    assert 0 < n_in < 5000
    counts, n_in = splat(uv, 240, 180, mode="nearest")
    assert counts.sum() == n_in


def test_identity_motion_equals_naive_accumulation(davis_camera, rng):
    n = 3000
    w = _window(np.sort(rng.uniform(0, 0.02, n)), rng.integers(0, 240, n), rng.integers(0, 180, n))
    frame = synthesize_event_frame(w, identity_pose, 1.3, davis_camera)
    naive = accumulate_events(w.events, davis_camera)
    np.testing.assert_array_equal(frame.counts, naive.counts)
    np.testing.assert_array_equal(frame.normalized, naive.normalized)


class TrueCameraTrack:
    def __init__(self, spec, T_S_C):
        self.spec, self.T_S_C = spec, T_S_C

    def query(self, times):
        poses = [sample_trajectory(self.spec, float(t)).pose @ self.T_S_C for t in times]
        return np.array([p.R for p in poses]), np.array([p.translation for p in poses])


@pytest.fixture(scope="module")
def moving_sequence():
    spec = TrajectorySpec("circle", duration=0.35)
    T_S_C = down_looking_extrinsics()
    cam = davis_camera()
    events = generate_events(Scene(seed=5), spec, cam, NoiseSpec(contrast_threshold=0.3), T_S_C=T_S_C)
    return spec, T_S_C, cam, events


def test_compensation_sharpens_edges(moving_sequence):
    spec, T_S_C, cam, events = moving_sequence
    w = select_window(events, 0.3, 15000)
    track = TrueCameraTrack(spec, T_S_C)
    depth = spec.height - T_S_C.translation[2]
    sharp = synthesize_event_frame(w, track, depth, cam)
    blurred = synthesize_event_frame(w, identity_pose, depth, cam)
    assert w.duration > 0.03
    assert np.var(sharp.counts) > 1.5 * np.var(blurred.counts)


def test_compensation_residual_vs_ground_truth(moving_sequence):
    spec, T_S_C, cam, events = moving_sequence
    w = select_window(events, 0.3, 15000)
    track = TrueCameraTrack(spec, T_S_C)
    depth = spec.height - T_S_C.translation[2]
    uv, valid = compensate_events(w.events, w.frame_time, track, depth, cam)
    # ground truth: intersect each event's ray with the plane, project into the camera at t_k
    T_k = sample_trajectory(spec, w.frame_time).pose @ T_S_C
    errs = []
    for i in range(0, len(w.events), 97):
        T_i = sample_trajectory(spec, float(w.events.t[i])).pose @ T_S_C
        ray = np.append(cam.pixel_rays[w.events.y[i], w.events.x[i]], 1.0)
        d = T_i.R @ ray
        X = T_i.translation - T_i.translation[2] / d[2] * d
        errs.append(np.linalg.norm(cam.project(T_k.inverse().apply(X)) - uv[i]))
    assert np.mean(errs) < 0.3
