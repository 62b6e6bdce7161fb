"""Readers and writers for the Event Camera Dataset text layout.

A dataset directory holds::

    events.txt        t x y p          (p in {0, 1})
    imu.txt           t ax ay az gx gy gz
    images.txt        t filename       (8-bit grayscale images)
    groundtruth.txt   t px py pz qx qy qz qw
    calibration.yaml  see :func:`load_calibration`

All timestamps are seconds as double precision. The IMU time offset from
the calibration is added to IMU timestamps at load time so every stream
shares one clock.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np
import yaml
from PIL import Image

from .errors import MissingData, MissingImage, ParseError, SchemaError
from .geometry import CalibrationBundle, CameraModel, Se3Transform

log = logging.getLogger(__name__)


class NonMonotonicTimestamp(UserWarning):
    """A stream contained a timestamp smaller than its predecessor."""


class Event(NamedTuple):
    t: float
    x: int
    y: int
    polarity: int


class ImuSample(NamedTuple):
    t: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass
class EventArray:
    """Column-oriented, time-ordered event stream."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.polarity = np.asarray(self.polarity, dtype=np.int8)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_events(cls, events):
        events = list(events)
        if not events:
            return cls.empty()
        t, x, y, p = zip(*events)
        return cls(np.array(t), np.array(x), np.array(y), np.array(p))

    @classmethod
    def concatenate(cls, chunks):
        chunks = [c for c in chunks if len(c)]
        if not chunks:
            return cls.empty()
        return cls(
            np.concatenate([c.t for c in chunks]),
            np.concatenate([c.x for c in chunks]),
            np.concatenate([c.y for c in chunks]),
            np.concatenate([c.polarity for c in chunks]),
        )

    def __len__(self):
        return len(self.t)

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return Event(float(self.t[index]), int(self.x[index]), int(self.y[index]), int(self.polarity[index]))
        return EventArray(self.t[index], self.x[index], self.y[index], self.polarity[index])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


@dataclass
class ImuArray:
    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.accel = np.asarray(self.accel, dtype=np.float64).reshape(-1, 3)
        self.gyro = np.asarray(self.gyro, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return ImuSample(float(self.t[index]), self.accel[index].copy(), self.gyro[index].copy())
        return ImuArray(self.t[index], self.accel[index], self.gyro[index])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


@dataclass
class IntensityFrame:
    t: float
    pixels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)


@dataclass
class Trajectory:
    """Timestamped ``T_WS`` poses with optional velocities."""

    t: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray
    velocities: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        if q.size and np.max(np.abs(norms - 1.0)) > 1e-8:
            q = q / norms
        self.quaternions = np.where(q[:, 3:4] < 0.0, -q, q)
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        if not (len(self.t) == len(self.positions) == len(self.quaternions)):
            raise ValueError("trajectory columns differ in length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_poses(cls, times, poses, velocities=None):
        poses = list(poses)
        if not poses:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), velocities)
        return cls(
            np.asarray(times),
            np.array([p.translation for p in poses]),
            np.array([p.rotation for p in poses]),
            velocities,
        )

    def __len__(self):
        return len(self.t)

    def pose(self, i):
        return Se3Transform(self.quaternions[i], self.positions[i])

    def poses(self):
        return [self.pose(i) for i in range(len(self))]


@dataclass
class Dataset:
    """All streams of one sequence on a single clock."""

    calibration: CalibrationBundle
    imu: ImuArray
    events: Optional[EventArray] = None
    frames: Optional[list] = None
    groundtruth: Optional[Trajectory] = None
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# number formatting
# --------------------------------------------------------------------------


def format_number(value):
    """Fixed 9-decimal formatting with trailing zeros stripped (``1.000000000 -> 1``)."""
    s = f"{value:.9f}"
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    if s in ("-0", ""):
        s = "0"
    return s


def _format_time(t):
    return f"{t:.9f}"


# --------------------------------------------------------------------------
# generic numeric table parsing
# --------------------------------------------------------------------------


def _parse_table(path, ncols, strict, what):
    """Parse whitespace-separated numeric rows; returns ``(rows, line_numbers)``."""
    path = Path(path)
    if not path.exists():
        raise MissingData(f"{what} file not found: {path}")
    rows = []
    lines = []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            try:
                if len(parts) != ncols:
                    raise ValueError(f"expected {ncols} columns, got {len(parts)}")
                values = [float(p) for p in parts]
                if not all(math.isfinite(v) for v in values):
                    raise ValueError("non-finite value")
            except ValueError as exc:
                if strict:
                    raise ParseError(f"malformed {what} line {text[:40]!r}: {exc}", line=lineno, path=str(path)) from None
                log.warning("skipping malformed %s line %d in %s", what, lineno, path)
                continue
            rows.append(values)
            lines.append(lineno)
    if not rows:
        return np.zeros((0, ncols)), np.zeros(0, dtype=int)
    return np.array(rows, dtype=np.float64), np.array(lines)


def _fast_table(path, ncols, what):
    """Fast path for well-formed files; returns None when the file needs the slow parser."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    except (ValueError, IndexError):
        return None
    if data.size == 0:
        return np.zeros((0, ncols))
    if data.shape[1] != ncols or not np.all(np.isfinite(data)):
        return None
    return data


def _check_monotonic(t, what, path):
    if len(t) > 1 and np.any(np.diff(t) < 0):
        n = int(np.sum(np.diff(t) < 0))
        warnings.warn(f"{n} non-monotonic timestamps in {what} file {path}", NonMonotonicTimestamp, stacklevel=3)


def _events_from_rows(rows, lines, path, strict):
    p = rows[:, 3]
    bad = (p != 0) & (p != 1)
    bad |= rows[:, 1] != np.round(rows[:, 1])
    bad |= rows[:, 2] != np.round(rows[:, 2])
    bad |= (rows[:, 1] < 0) | (rows[:, 2] < 0)
    if np.any(bad):
        first = int(np.argmax(bad))
        if strict:
            line = int(lines[first]) if lines is not None else None
            raise ParseError("polarity must be 0 or 1 and coordinates non-negative integers", line=line, path=str(path))
        log.warning("skipping %d malformed event lines in %s", int(bad.sum()), path)
        rows = rows[~bad]
    pol = np.where(rows[:, 3] > 0.5, 1, -1)
    return EventArray(rows[:, 0], rows[:, 1].astype(np.int32), rows[:, 2].astype(np.int32), pol)


# --------------------------------------------------------------------------
# events
# --------------------------------------------------------------------------


def load_events(path, strict=True):
    """Load a whole ``events.txt`` into an :class:`EventArray`.

    ``p = 0`` maps to polarity -1 and ``p = 1`` to +1. With ``strict=False``
    malformed lines are skipped with a warning instead of raising.
    """
    path = Path(path)
    if not path.exists():
        raise MissingData(f"events file not found: {path}")
    rows = _fast_table(path, 4, "event")
    lines = None
    if rows is None:
        rows, lines = _parse_table(path, 4, strict, "event")
    try:
        events = _events_from_rows(rows, lines, path, strict)
    except ParseError:
        if lines is not None:
            raise
        # re-parse slowly to report the offending line number
        rows, lines = _parse_table(path, 4, strict, "event")
        events = _events_from_rows(rows, lines, path, strict)
    _check_monotonic(events.t, "event", path)
    return events


def iter_events(path, chunk_size=1_000_000, strict=True) -> Iterator[EventArray]:
    """Stream ``events.txt`` in chunks without holding the whole file."""
    path = Path(path)
    if not path.exists():
        raise MissingData(f"events file not found: {path}")
    rows, lines = [], []
    last_t = -math.inf
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            try:
                if len(parts) != 4:
                    raise ValueError("expected 4 columns")
                row = [float(v) for v in parts]
            except ValueError:
                if strict:
                    raise ParseError(f"malformed event line {text[:40]!r}", line=lineno, path=str(path)) from None
                log.warning("skipping malformed event line %d in %s", lineno, path)
                continue
            if row[0] < last_t:
                warnings.warn(f"non-monotonic event timestamp at line {lineno}", NonMonotonicTimestamp, stacklevel=2)
            last_t = row[0]
            rows.append(row)
            lines.append(lineno)
            if len(rows) >= chunk_size:
                yield _events_from_rows(np.array(rows), np.array(lines), path, strict)
                rows, lines = [], []
    if rows:
        yield _events_from_rows(np.array(rows), np.array(lines), path, strict)


def write_events(path, events):
    with open(path, "w", encoding="ascii") as fh:
        p = (events.polarity > 0).astype(int)
        fh.writelines(
            f"{t:.9f} {x} {y} {pp}\n" for t, x, y, pp in zip(events.t.tolist(), events.x.tolist(), events.y.tolist(), p.tolist())
        )


# --------------------------------------------------------------------------
# imu / frames
# --------------------------------------------------------------------------


def load_imu(path, time_offset=0.0, strict=True):
    """Load ``imu.txt``; ``time_offset`` is added to every timestamp."""
    path = Path(path)
    rows = _fast_table(path, 7, "imu") if path.exists() else None
    if rows is None:
        rows, _ = _parse_table(path, 7, strict, "imu")
    imu = ImuArray(rows[:, 0] + time_offset, rows[:, 1:4], rows[:, 4:7])
    _check_monotonic(imu.t, "imu", path)
    return imu


def write_imu(path, imu, time_offset=0.0):
    """Write IMU samples; ``time_offset`` is subtracted so loading with it restores ``imu.t``."""
    with open(path, "w", encoding="ascii") as fh:
        for t, a, g in zip(imu.t.tolist(), imu.accel.tolist(), imu.gyro.tolist()):
            vals = " ".join(format_number(v) for v in (*a, *g))
            fh.write(f"{_format_time(t - time_offset)} {vals}\n")


def read_frame_index(index_path):
    index_path = Path(index_path)
    if not index_path.exists():
        raise MissingData(f"frame index not found: {index_path}")
    entries = []
    with open(index_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError("expected 't filename'", line=lineno, path=str(index_path))
            try:
                t = float(parts[0])
            except ValueError:
                raise ParseError("bad timestamp", line=lineno, path=str(index_path)) from None
            entries.append((t, parts[1]))
    return entries


def iter_frames(index_path, image_dir=None) -> Iterator[IntensityFrame]:
    index_path = Path(index_path)
    image_dir = Path(image_dir) if image_dir is not None else index_path.parent
    for t, name in read_frame_index(index_path):
        yield IntensityFrame(t, _read_image(image_dir / name))


def load_frames(index_path, image_dir=None):
    """Load every frame listed in ``images.txt``; missing files raise MissingImage."""
    index_path = Path(index_path)
    image_dir = Path(image_dir) if image_dir is not None else index_path.parent
    entries = read_frame_index(index_path)
    for _, name in entries:
        if not (image_dir / name).exists():
            raise MissingImage(f"image listed in {index_path} not found: {image_dir / name}")
    return [IntensityFrame(t, _read_image(image_dir / name)) for t, name in entries]


def _read_image(path):
    if not Path(path).exists():
        raise MissingImage(f"image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def write_frames(directory, frames, subdir="images"):
    directory = Path(directory)
    (directory / subdir).mkdir(parents=True, exist_ok=True)
    with open(directory / "images.txt", "w", encoding="ascii") as fh:
        for k, frame in enumerate(frames):
            name = f"{subdir}/frame_{k:08d}.png"
            Image.fromarray(frame.pixels).save(directory / name, optimize=False)
            fh.write(f"{_format_time(frame.t)} {name}\n")


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


def write_trajectory(path, traj):
    """One line per pose: ``t px py pz qx qy qz qw``."""
    with open(path, "w", encoding="ascii") as fh:
        for i in range(len(traj)):
            vals = (traj.t[i], *traj.positions[i], *traj.quaternions[i])
            fh.write(" ".join(format_number(v) for v in vals) + "\n")


def read_trajectory(path, strict=True):
    path = Path(path)
    rows = _fast_table(path, 8, "trajectory") if path.exists() else None
    if rows is None:
        rows, _ = _parse_table(path, 8, strict, "trajectory")
    if len(rows) > 1 and np.any(np.diff(rows[:, 0]) <= 0):
        raise ParseError("trajectory timestamps must be strictly increasing", path=str(path))
    return Trajectory(rows[:, 0], rows[:, 1:4], rows[:, 4:8])


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

_CAMERA_KEYS = ("width", "height", "intrinsics", "distortion")
_IMU_KEYS = (
    "time_offset",
    "gyro_noise_density",
    "accel_noise_density",
    "gyro_random_walk",
    "accel_random_walk",
    "gravity_magnitude",
)


def _camera_from_dict(d, name, missing):
    if not isinstance(d, dict):
        missing.append(name)
        return None
    absent = [f"{name}.{k}" for k in _CAMERA_KEYS if k not in d]
    if absent:
        missing.extend(absent)
        return None
    try:
        fx, fy, cx, cy = (float(v) for v in d["intrinsics"])
        dist = [float(v) for v in d["distortion"]] + [0.0] * (5 - len(d["distortion"]))
        return CameraModel(int(d["width"]), int(d["height"]), fx, fy, cx, cy, *dist[:5])
    except (TypeError, ValueError):
        missing.append(name)
        return None


def _transform_from_value(value, name, missing):
    try:
        M = np.asarray(value, dtype=float)
        if M.shape != (4, 4):
            raise ValueError
        R = M[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError
        return Se3Transform.from_matrix(M)
    except (TypeError, ValueError):
        missing.append(name)
        return None


def calibration_from_dict(data):
    if not isinstance(data, dict):
        raise SchemaError(["<root>"])
    missing = []
    cams = {}
    for key in ("event_camera", "standard_camera"):
        if key not in data:
            missing.append(key)
        else:
            cams[key] = _camera_from_dict(data[key], key, missing)
    transforms = {}
    for key in ("T_S_C0", "T_S_C1"):
        if key not in data:
            missing.append(key)
        else:
            transforms[key] = _transform_from_value(data[key], key, missing)
    imu = data.get("imu")
    if not isinstance(imu, dict):
        missing.append("imu")
        imu = {}
    else:
        missing.extend(f"imu.{k}" for k in _IMU_KEYS if k not in imu)
    if missing:
        raise SchemaError(missing)
    try:
        return CalibrationBundle(
            event_camera=cams["event_camera"],
            standard_camera=cams["standard_camera"],
            T_S_C0=transforms["T_S_C0"],
            T_S_C1=transforms["T_S_C1"],
            imu_time_offset=float(imu["time_offset"]),
            gyro_noise_density=float(imu["gyro_noise_density"]),
            accel_noise_density=float(imu["accel_noise_density"]),
            gyro_random_walk=float(imu["gyro_random_walk"]),
            accel_random_walk=float(imu["accel_random_walk"]),
            gravity_magnitude=float(imu["gravity_magnitude"]),
        )
    except ValueError as exc:
        raise SchemaError([str(exc)]) from None


def load_calibration(path):
    """Load the YAML calibration file.

    Layout::

        event_camera:    {width, height, intrinsics: [fx, fy, cx, cy],
                          distortion: [k1, k2, p1, p2, k3]}
        standard_camera: same fields
        T_S_C0:          4x4 row-major matrix, event camera -> IMU
        T_S_C1:          4x4 row-major matrix, standard camera -> IMU
        imu:             {time_offset, gyro_noise_density, accel_noise_density,
                          gyro_random_walk, accel_random_walk, gravity_magnitude}
    """
    path = Path(path)
    if not path.exists():
        raise MissingData(f"calibration file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ParseError(f"invalid YAML: {exc}", path=str(path)) from None
    return calibration_from_dict(data)


def _camera_to_dict(cam):
    return {
        "width": cam.width,
        "height": cam.height,
        "intrinsics": [cam.fx, cam.fy, cam.cx, cam.cy],
        "distortion": [cam.k1, cam.k2, cam.p1, cam.p2, cam.k3],
    }


def calibration_to_dict(calib):
    return {
        "event_camera": _camera_to_dict(calib.event_camera),
        "standard_camera": _camera_to_dict(calib.standard_camera),
        "T_S_C0": np.round(calib.T_S_C0.matrix(), 12).tolist(),
        "T_S_C1": np.round(calib.T_S_C1.matrix(), 12).tolist(),
        "imu": {
            "time_offset": calib.imu_time_offset,
            "gyro_noise_density": calib.gyro_noise_density,
            "accel_noise_density": calib.accel_noise_density,
            "gyro_random_walk": calib.gyro_random_walk,
            "accel_random_walk": calib.accel_random_walk,
            "gravity_magnitude": calib.gravity_magnitude,
        },
    }


def save_calibration(path, calib):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(calibration_to_dict(calib), fh, sort_keys=False)


def calibration_from_ecd(calib_txt, width=240, height=180, T_S_C=None, **imu):
    """Build a bundle from an Event Camera Dataset ``calib.txt``.

    That file holds ``fx fy cx cy k1 k2 p1 p2 k3`` for the shared DAVIS pixel
    array, so both cameras get the same model. Extrinsics are not part of the
    file and default to identity.
    """
    values = [float(v) for v in Path(calib_txt).read_text().split()]
    if len(values) < 4:
        raise SchemaError(["intrinsics"])
    values += [0.0] * (9 - len(values))
    cam = CameraModel(width, height, *values[:9])
    T = T_S_C if T_S_C is not None else Se3Transform.identity()
    return CalibrationBundle(cam, cam, T, T, **imu)


# --------------------------------------------------------------------------
# directories
# --------------------------------------------------------------------------


def load_dataset(directory, need_events=True, need_frames=True, calibration=None):
    """Load a dataset directory; only the streams requested must exist."""
    directory = Path(directory)
    calib = calibration if calibration is not None else load_calibration(directory / "calibration.yaml")
    imu = load_imu(directory / "imu.txt", time_offset=calib.imu_time_offset)
    events = None
    if need_events:
        events = load_events(directory / "events.txt")
    frames = None
    if need_frames:
        if not (directory / "images.txt").exists():
            raise MissingData(f"images.txt required but not found in {directory}")
        frames = load_frames(directory / "images.txt", directory)
    elif (directory / "images.txt").exists():
        frames = [IntensityFrame(t, np.zeros((0, 0), np.uint8)) for t, _ in read_frame_index(directory / "images.txt")]
    gt = None
    if (directory / "groundtruth.txt").exists():
        gt = read_trajectory(directory / "groundtruth.txt")
    return Dataset(calib, imu, events, frames, gt)


def save_dataset(directory, dataset):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    calib = dataset.calibration
    save_calibration(directory / "calibration.yaml", calib)
    write_imu(directory / "imu.txt", dataset.imu, time_offset=calib.imu_time_offset)
    if dataset.events is not None:
        write_events(directory / "events.txt", dataset.events)
    if dataset.frames is not None:
        write_frames(directory, dataset.frames)
    if dataset.groundtruth is not None:
        write_trajectory(directory / "groundtruth.txt", dataset.groundtruth)
