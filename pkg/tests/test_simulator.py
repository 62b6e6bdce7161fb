import math

import numpy as np
import pytest

from hybrid_vio.errors import OutOfRange
from hybrid_vio.geometry import Se3Transform, so3_log
from hybrid_vio.imu import SensorState, imu_segment, propagate
from hybrid_vio.simulator import (
    NoiseSpec,
    Scene,
    TrajectorySpec,
    auto_expose,
    davis_camera,
    down_looking_extrinsics,
    generate_events,
    generate_imu,
    log_intensity,
    render_frame,
    sample_trajectory,
    threshold_crossings,
)

QUIET = NoiseSpec(contrast_threshold=0.3)


@pytest.fixture(scope="module")
def scene():
    return Scene(seed=3)


def test_circle_speed():
    spec = TrajectorySpec("circle", radius=1.2, angular_velocity=1.4)
    for t in (0.0, 1.3, 7.7):
        assert np.linalg.norm(sample_trajectory(spec, t).velocity) == pytest.approx(1.68, abs=1e-12)


def test_hover_is_still():
    s = sample_trajectory(TrajectorySpec("hover"), 2.0)
    np.testing.assert_array_equal(s.velocity, 0.0)
    np.testing.assert_array_equal(s.omega_W, 0.0)
    np.testing.assert_allclose(s.R_WS, np.eye(3), atol=1e-15)


def test_out_of_range():
    with pytest.raises(OutOfRange):
        sample_trajectory(TrajectorySpec(duration=2.0), 2.5)


@pytest.mark.parametrize(
    "spec",
    [
        TrajectorySpec("circle", static_time=0.5, ramp_time=1.0, duration=3.0),
        TrajectorySpec("sinusoid-6dof", duration=3.0),
        TrajectorySpec("hover", vibration_amplitude=0.01, vibration_angle=0.02, duration=3.0),
        TrajectorySpec("hover", vibration_amplitude=0.01, vibration_angle=0.02, duration=3.0, static_time=0.5, ramp_time=1.5),
    ],
)
def test_finite_differences_match_analytic_derivatives(spec):
    for t in (0.7, 1.2, 1.55, 2.4):
        errs = []
        for h in (1e-3, 5e-4):
            a, b = sample_trajectory(spec, t - h), sample_trajectory(spec, t + h)
            mid = sample_trajectory(spec, t)
            dv = (b.position - a.position) / (2 * h) - mid.velocity
            da = (b.velocity - a.velocity) / (2 * h) - mid.acceleration
            dw = so3_log(b.R_WS @ a.R_WS.T) / (2 * h) - mid.omega_W
            errs.append(max(np.abs(dv).max(), np.abs(da).max(), np.abs(dw).max()))
        assert errs[0] < 1e-2
        # second order: halving the step quarters the error
        assert errs[1] <= errs[0] / 3.0 + 1e-9


def _static_pose():
    return sample_trajectory(TrajectorySpec("hover"), 0.0).pose @ down_looking_extrinsics()


def test_zero_exposure_render_samples_texture(scene):
    cam = davis_camera()
    T_WC = _static_pose()
    frame = render_frame(scene, T_WC, cam, 0.0, QUIET)
    rays = cam.pixel_rays
    d = np.concatenate([rays, np.ones(rays.shape[:2] + (1,))], axis=-1) @ T_WC.R.T
    s = -T_WC.translation[2] / d[..., 2]
    xy = T_WC.translation[:2] + s[..., None] * d[..., :2]
    expected = 255.0 * scene.intensity(xy)
    # bilinear rasterisation of the dots costs a few gray levels at most
    err = np.abs(frame.pixels - expected)
    assert err.max() < 5.0 and err.mean() < 0.7
    again = render_frame(scene, T_WC, cam, 0.0, QUIET)
    np.testing.assert_array_equal(frame.pixels, again.pixels)


def _gradient_energy(img):
    img = img.astype(float)
    return np.mean(np.diff(img, axis=0) ** 2) + np.mean(np.diff(img, axis=1) ** 2)


def test_motion_blur_reduces_gradient_energy(scene):
    cam = davis_camera()
    spec = TrajectorySpec("circle", angular_velocity=3.0, duration=2.0)
    T_S_C = down_looking_extrinsics()
    blur = NoiseSpec(blur=True)
    pose = sample_trajectory(spec, 1.0).pose @ T_S_C
    sharp = render_frame(scene, pose, cam, 0.0, blur)
    smeared = render_frame(scene, pose, cam, 0.02, blur, trajectory=spec, t=1.0, T_S_C=T_S_C)
    assert _gradient_energy(smeared.pixels) < _gradient_energy(sharp.pixels)


def test_read_noise_scales_residual(scene):
    cam = davis_camera()
    pose = _static_pose()
    clean = render_frame(scene, pose, cam, 0.0, QUIET, brightness=150.0).pixels.astype(float)
    rng = np.random.default_rng(5)
    stds = []
    for sigma in (3.0, 6.0):
        noisy = render_frame(scene, pose, cam, 0.0, NoiseSpec(read_noise=sigma), rng, brightness=150.0)
        stds.append(np.std(noisy.pixels - clean))
    assert stds[1] / stds[0] == pytest.approx(2.0, rel=0.05)


def test_static_scene_produces_no_events(scene):
    spec = TrajectorySpec("hover", duration=0.5)
    events = generate_events(scene, spec, davis_camera(), QUIET, T_S_C=down_looking_extrinsics())
    assert len(events) == 0


def _walk(L_series, times, C):
    """Brute-force per-pixel threshold walk on a dense series."""
    ref = L_series[0]
    out = []
    for L, t in zip(L_series[1:], times[1:]):
        while abs(L - ref) >= C:
            ref += math.copysign(C, L - ref)
            out.append((t, int(math.copysign(1, L - ref + 1e-300))))
    return ref, out


def test_threshold_crossings_match_brute_force_walk():
    C = 0.2
    times = np.linspace(0.0, 1.0, 2001)
    L = np.log(0.3) + 3.0 * C * np.sin(2 * np.pi * times) + 1e-9
    ref_bf, bf = _walk(L, times, C)
    L_ref = np.array([L[0]])
    got = []
    for k in range(1, len(times)):
        pix, t, pol, L_ref = threshold_crossings(L[k - 1 : k], L[k : k + 1], L_ref, np.array([C]), times[k - 1], times[k])
        got += list(zip(t, pol))
    assert len(got) == len(bf)
    assert [p for _, p in got] == [p for _, p in bf]
    assert L_ref[0] == pytest.approx(ref_bf, abs=1e-12)
    # a crossing inside a step gets an interpolated time within that step
    assert np.all(np.abs(np.array([t for t, _ in got]) - np.array([t for t, _ in bf])) <= times[1] + 1e-12)


def test_step_edge_gives_exactly_three_events_per_swept_pixel():
    low, high = 0.2, 0.8
    C = (math.log(high + 1e-3) - math.log(low + 1e-3)) / 3.0 - 1e-4
    scene = Scene(kind="step", edge_x=0.025, edge_low=low, edge_high=high, edge_width=0.001)
    spec = TrajectorySpec("circle", radius=0.05, angular_velocity=1.0, duration=math.pi / 2)
    cam = davis_camera()
    T_S_C = down_looking_extrinsics()
    events = generate_events(scene, spec, cam, NoiseSpec(contrast_threshold=C), T_S_C=T_S_C)

    # ground x seen by each pixel at start and end
    def ground_x(t):
        T_WC = sample_trajectory(spec, t).pose @ T_S_C
        rays = cam.pixel_rays
        d = np.concatenate([rays, np.ones(rays.shape[:2] + (1,))], axis=-1) @ T_WC.R.T
        s = -T_WC.translation[2] / d[..., 2]
        return T_WC.translation[0] + s * d[..., 0]

    x0, x1 = ground_x(0.0), ground_x(spec.duration)
    margin = 0.01
    swept = (x0 > 0.025 + margin) & (x1 < 0.025 - margin)
    assert swept.sum() > 100
    counts = np.zeros((cam.height, cam.width), int)
    np.add.at(counts, (events.y, events.x), 1)
    np.testing.assert_array_equal(counts[swept], 3)
    on_swept = swept[events.y, events.x]
    assert np.all(events.polarity[on_swept] == -1)


def test_reversed_motion_flips_dominant_polarity(scene):
    cam = davis_camera()
    T_S_C = down_looking_extrinsics()
    spec = TrajectorySpec("circle", duration=0.3)
    times = np.linspace(0.0, 0.3, 301)
    Ls = [log_intensity(scene, spec, cam, t, T_S_C).ravel() for t in times]
    C = np.full(Ls[0].size, 0.3)

    def signed_counts(seq):
        ref = seq[0].copy()
        net = np.zeros(ref.size)
        for k in range(1, len(seq)):
            pix, _, pol, ref = threshold_crossings(seq[k - 1], seq[k], ref, C, 0.0, 1.0)
            np.add.at(net, pix, pol)
        return net

    fwd = signed_counts(Ls)
    bwd = signed_counts(Ls[::-1])
    active = (np.abs(fwd) >= 2) & (np.abs(bwd) >= 2)
    assert active.sum() > 50
    assert np.mean(np.sign(fwd[active]) != np.sign(bwd[active])) > 0.95


def test_signed_event_count_reconstructs_log_intensity(scene):
    cam = davis_camera()
    T_S_C = down_looking_extrinsics()
    spec = TrajectorySpec("circle", duration=0.4)
    C = 0.3
    events = generate_events(scene, spec, cam, NoiseSpec(contrast_threshold=C), T_S_C=T_S_C)
    assert len(events) > 1000
    assert np.all(np.diff(events.t) >= 0)
    L0 = log_intensity(scene, spec, cam, 0.0, T_S_C)
    for t_end in (0.2, 0.4):
        sel = events.t <= t_end + 1e-12
        net = np.zeros(L0.shape)
        np.add.at(net, (events.y[sel], events.x[sel]), events.polarity[sel])
        change = log_intensity(scene, spec, cam, t_end, T_S_C) - L0
        assert np.max(np.abs(change - C * net)) < C


def test_hover_imu_is_pure_gravity():
    imu, bias = generate_imu(TrajectorySpec("hover", duration=1.0), NoiseSpec())
    np.testing.assert_array_equal(imu.gyro, 0.0)
    np.testing.assert_array_equal(imu.accel, np.tile([0.0, 0.0, 9.81], (len(imu), 1)))
    assert len(imu) == 1001
    np.testing.assert_array_equal(bias.gyro_bias, 0.0)


def test_zero_noise_imu_propagates_to_ground_truth():
    spec = TrajectorySpec("circle", duration=5.0, static_time=0.5, ramp_time=1.0)
    imu, _ = generate_imu(spec, NoiseSpec())
    s0 = sample_trajectory(spec, 0.0)
    state = SensorState(0.0, s0.pose, s0.velocity)
    end = propagate(state, imu_segment(imu, 0.0, 5.0))
    truth = sample_trajectory(spec, 5.0)
    assert np.linalg.norm(end.T_WS.translation - truth.position) < 1e-4


def test_generators_are_deterministic(scene):
    spec = TrajectorySpec("circle", duration=0.2)
    noise = NoiseSpec(
        gyro_noise_density=1e-3, accel_noise_density=1e-2, gyro_random_walk=1e-4, accel_random_walk=1e-3,
        contrast_threshold=0.3, threshold_jitter=0.03, noise_event_rate=500.0,
    )
    a, _ = generate_imu(spec, noise, seed=11)
    b, _ = generate_imu(spec, noise, seed=11)
    assert a.accel.tobytes() == b.accel.tobytes() and a.gyro.tobytes() == b.gyro.tobytes()
    cam = davis_camera()
    e1 = generate_events(scene, spec, cam, noise, T_S_C=down_looking_extrinsics(), seed=4)
    e2 = generate_events(scene, spec, cam, noise, T_S_C=down_looking_extrinsics(), seed=4)
    assert e1.t.tobytes() == e2.t.tobytes() and e1.x.tobytes() == e2.x.tobytes()


def test_auto_expose_direction():
    assert auto_expose(70.0, 0.004) == 0.004
    assert auto_expose(140.0, 0.004) < 0.004
    assert auto_expose(20.0, 0.004) > 0.004
    assert auto_expose(255.0, 0.004, bounds=(1e-4, 0.03)) == 1e-4


def test_auto_exposure_closed_loop_converges(scene):
    cam = davis_camera()
    pose = _static_pose()
    sensitivity = 60000.0
    tex_mean = render_frame(scene, pose, cam, 0.0, QUIET, brightness=1.0 * 255).pixels.mean() / 255.0
    exposure = 10 * 70.0 / (sensitivity * tex_mean)
    rng = np.random.default_rng(0)
    noise = NoiseSpec(read_noise=1.0)
    means = []
    for _ in range(30):
        frame = render_frame(scene, pose, cam, exposure, noise, rng, brightness=sensitivity * exposure)
        means.append(frame.pixels.mean())
        exposure = auto_expose(means[-1], exposure)
    assert means[0] > 200
    assert abs(means[-1] - 70.0) < 2.0
