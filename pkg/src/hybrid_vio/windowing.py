"""Frame-synchronised event windows and event-rate measurement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import EventArray
from .errors import EmptyWindow

DEFAULT_WINDOW_SIZE = 15_000
DEFAULT_RATE_HORIZON = 0.020


@dataclass
class EventWindow:
    """The ``N`` most recent events strictly before a frame timestamp."""

    frame_time: float
    events: EventArray
    start: int
    stop: int
    requested: int

    @property
    def n(self):
        return self.stop - self.start

    @property
    def short(self):
        """True when fewer than the requested number of events were available."""
        return self.n < self.requested

    @property
    def duration(self):
        if self.n == 0:
            return 0.0
        return float(self.events.t[-1] - self.events.t[0])


def select_window(events, t_k, n):
    """Return the window of ``n`` events ending just before ``t_k``.

    Windows of consecutive frames may overlap; when fewer than ``n`` events
    precede ``t_k`` all of them are returned and the window is flagged short.
    """
    if n < 1:
        raise ValueError("window size must be at least 1")
    stop = int(np.searchsorted(events.t, t_k, side="left"))
    if stop == 0:
        raise EmptyWindow(f"no event before t={t_k:.6f}")
    start = max(0, stop - n)
    return EventWindow(float(t_k), events[start:stop], start, stop, n)


def event_rate(events, t, horizon=DEFAULT_RATE_HORIZON):
    """Events per second over ``(t - horizon, t]``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    hi = np.searchsorted(events.t, t, side="right")
    lo = np.searchsorted(events.t, t - horizon, side="right")
    return float(hi - lo) / horizon
