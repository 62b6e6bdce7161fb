"""Exception types shared across the package.

Errors are grouped so the command line can map them onto exit codes:
``ConfigError`` (2), ``DataError`` (3) and ``EstimatorError`` (4).
"""


class HybridVioError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(HybridVioError):
    pass


class DataError(HybridVioError):
    pass


class EstimatorError(HybridVioError):
    pass


# geometry
class NonPositiveDepth(EstimatorError):
    pass


class BehindCamera(EstimatorError):
    pass


# dataset io
class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:" if path else ""
        where += f"{line}: " if line is not None else ""
        super().__init__(where + message)


class MissingImage(DataError):
    pass


class SchemaError(DataError):
    def __init__(self, missing):
        if isinstance(missing, str):
            missing = [missing]
        self.missing = list(missing)
        super().__init__("missing or invalid calibration fields: " + ", ".join(self.missing))


class MissingData(DataError):
    pass


# event windowing / synthesis
class EmptyWindow(EstimatorError):
    pass


class NoVisibleLandmarks(EstimatorError):
    pass


# frontend
class DegenerateGeometry(EstimatorError):
    pass


# imu
class NotStatic(EstimatorError):
    pass


class GapTooLarge(EstimatorError):
    pass


# backend
class WindowTooSmall(EstimatorError):
    pass


class NumericalFailure(EstimatorError):
    pass


# evaluation
class InsufficientOverlap(DataError):
    pass


class ZeroTraveledDistance(DataError):
    pass


class SegmentTooLong(DataError):
    pass


# simulator
class OutOfRange(HybridVioError):
    pass
