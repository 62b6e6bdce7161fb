"""Run configuration: one structured file plus flag overrides.

Unknown keys are rejected everywhere so a typo never silently falls back
to a default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .backend import BackendParams
from .errors import ConfigError
from .frontend import FrontendParams
from .windowing import DEFAULT_RATE_HORIZON, DEFAULT_WINDOW_SIZE

MODES = {"fr+e+i": (0, 1), "e+i": (0,), "fr+i": (1,)}

# short names accepted in config files
_BACKEND_ALIASES = {"lm_max_iter": "lm_max_iterations", "sigma_zero_vel": "sigma_zero_velocity"}


@dataclass
class PipelineConfig:
    mode: str = "fr+e+i"
    seed: int = 0
    single_activity: bool = False
    event_window_size: int = DEFAULT_WINDOW_SIZE
    c_sat: float = 3.0
    fallback_depth: float = 1.0
    no_motion_rate_threshold: float = 1000.0
    no_motion_horizon_s: float = DEFAULT_RATE_HORIZON
    static_init_duration_s: float = 1.5
    static_variance_gate: float = 0.1
    max_imu_gap_s: float = 0.010
    gravity_mps2: Optional[float] = None
    frame_rate: float = 24.0
    frontend: FrontendParams = field(default_factory=FrontendParams)
    backend: BackendParams = field(default_factory=BackendParams)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        if self.event_window_size < 1:
            raise ConfigError("event_window_size must be positive")
        for name in ("c_sat", "fallback_depth", "no_motion_horizon_s", "static_init_duration_s", "max_imu_gap_s", "frame_rate"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def sensors(self):
        return MODES[self.mode]

    @property
    def uses_events(self):
        return 0 in self.sensors

    @property
    def uses_frames(self):
        return 1 in self.sensors


def _section(cls, data, aliases=None, name=""):
    data = dict(data or {})
    for short, full in (aliases or {}).items():
        if short in data:
            if full in data:
                raise ConfigError(f"{name}: both {short!r} and {full!r} given")
            data[full] = data.pop(short)
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(data):
    data = dict(data or {})
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    frontend = _section(FrontendParams, data.pop("frontend", None), name="frontend")
    backend = _section(BackendParams, data.pop("backend", None), _BACKEND_ALIASES, name="backend")
    allowed = {f.name for f in fields(PipelineConfig)} - {"frontend", "backend"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    try:
        return PipelineConfig(frontend=frontend, backend=backend, **data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg):
    return asdict(cfg)


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return config_from_dict(data)


def with_overrides(cfg, **overrides):
    """Apply flag overrides; ``None`` values leave the setting untouched."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    try:
        return replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
