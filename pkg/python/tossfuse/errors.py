"""
    Exceptions raised across the pipeline.

    Everything derives from `TossFuseError`, so callers (and the CLI) can
    catch one type. Rejected inputs are also `ValueError`-s.
"""
from typing import Any, Optional


class TossFuseError(Exception):
    """Base class for all library errors."""


class InvalidInputError(TossFuseError, ValueError):
    """Input violates a documented precondition."""


class ConfigError(InvalidInputError):
    """Malformed configuration or artifact file."""


class EmptySurfaceError(TossFuseError):
    """The signed distance field has no zero crossing."""


class BehindCameraError(InvalidInputError):
    """Point lies on or behind the image plane."""


class DegenerateCorrespondenceError(TossFuseError):
    """Fewer than 3 matches, or collinear ones."""


class InsufficientOverlapError(TossFuseError):
    """ICP ran out of correspondences."""

    def __init__(self, message: str, count: int = 0):
        super().__init__(message)
        self.count = count


class TrackingLostError(TossFuseError):

    def __init__(self, message: str, last_good_frame: int):
        super().__init__(message)
        self.last_good_frame = last_good_frame


class SolverError(TossFuseError):
    """Contact impulse solver hit its iteration cap."""

    def __init__(self, message: str, residual: float, step: Optional[int] = None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class UninformativeDataError(TossFuseError):
    """No transition shows contact activity."""


class DegenerateHullError(TossFuseError):
    """Points are coplanar, no 3D hull exists."""


class StageError(TossFuseError):
    """A pipeline stage failed; carries the partial report."""

    def __init__(self, stage: str, cause: BaseException, report: Any = None):
        super().__init__(f'stage {stage!r} failed: {type(cause).__name__}: {cause}')
        self.stage = stage
        self.cause = cause
        self.report = report
