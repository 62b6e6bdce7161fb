import numpy as np

from hybrid_vio.geometry import Se3Transform, quat_exp


def random_pose(rng, angle=np.pi, scale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Se3Transform(quat_exp(axis * rng.uniform(0, angle)), rng.normal(size=3) * scale)


def synthetic_window(rng, n_frames=4, n_landmarks=30, noise_px=0.0, perturb=0.0, spacing=1 / 24, sensors=(0, 1),
                     keyframes=None, params=None):
    """Window over a simulated circle with exact IMU, returned with its truth.

    Landmarks lie on the ground plane below the trajectory; each sensor gets
    its own landmark set. ``perturb`` scales random errors added to states
    and landmarks.
    """
    from hybrid_vio.backend import FrameRecord, OptimizationWindow
    from hybrid_vio.imu import SensorState
    from hybrid_vio.simulator import NoiseSpec, TrajectorySpec, generate_imu, sample_trajectory, scenario

    sc = scenario("circle")
    calib = sc.calibration()
    t0 = float(rng.uniform(3.0, 5.0))
    spec = TrajectorySpec("circle", duration=t0 + n_frames * spacing + 0.1)
    imu, _ = generate_imu(spec, NoiseSpec())
    window = OptimizationWindow(params)
    truth_states, truth_landmarks = [], {}
    times = t0 + spacing * np.arange(n_frames)
    center = sample_trajectory(spec, float(times.mean())).position
    for s in sensors:
        for j in range(n_landmarks):
            truth_landmarks[(s, j)] = np.array([*(center[:2] + rng.uniform(-0.35, 0.35, 2)), rng.uniform(-0.1, 0.1)])
    keyframes = keyframes if keyframes is not None else [True] * n_frames
    for k, t in enumerate(times):
        smp = sample_trajectory(spec, float(t))
        truth = SensorState(float(t), smp.pose, smp.velocity)
        truth_states.append(truth)
        obs = {}
        for key, X in truth_landmarks.items():
            cam = calib.camera(key[0])
            P = (smp.pose @ calib.T_S_C(key[0])).inverse().apply(X)
            uv = cam.project(P)
            if cam.in_image(uv):
                obs[key] = uv + rng.normal(0, noise_px, 2)
        state = truth
        if perturb > 0:
            d = rng.normal(size=15) * perturb * np.array([0.02] * 3 + [0.05] * 3 + [0.05] * 3 + [0.002] * 3 + [0.02] * 3)
            state = truth.retract(d)
        window.frames.append(FrameRecord(k, state, keyframes[k], obs))
    for key, X in truth_landmarks.items():
        window.add_landmark(key, X + rng.normal(0, 0.03 * perturb, 3))
    return window, calib, imu, truth_states, truth_landmarks


# pass/fail lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE_RESULTS = []
