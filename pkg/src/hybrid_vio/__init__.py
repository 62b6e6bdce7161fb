"""Visual-inertial odometry fusing event frames, intensity frames and IMU data.

Modules: ``geometry`` (SE(3), camera model), ``dataset_io`` (text formats),
``windowing`` and ``synthesis`` (event windows and motion-compensated event
frames), ``frontend`` (FAST + KLT tracking, triangulation), ``imu``
(propagation, preintegration), ``backend`` (sliding-window
Levenberg-Marquardt), ``evaluation``, ``simulator``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
