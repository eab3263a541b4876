"""
Exception types raised by EgoFlow.

Input problems derive from ValueError as well, so callers that only
know the standard library can still catch them.
"""

from pathlib import Path
from typing import Optional, Union


class EgoFlowError(Exception):
    """Base class for all EgoFlow errors."""


class InvalidPoseError(EgoFlowError, ValueError):
    """Rotation is not orthonormal, or a pose array is malformed."""


class InvalidAxisError(EgoFlowError, ValueError):
    """Rotation axis has zero norm."""


class InvalidIntrinsicsError(EgoFlowError, ValueError):
    """Camera intrinsics violate their invariants."""


class GridShapeError(EgoFlowError, ValueError):
    """Dense grids disagree in shape, or values violate a grid invariant."""


class UndefinedLossError(EgoFlowError, ValueError):
    """Too few usable pixels to evaluate a loss term."""


class RefinementInitError(EgoFlowError, ValueError):
    """Refinement objective is not finite at the initial pose."""


class DegenerateMotionError(EgoFlowError, ValueError):
    """Generated motion leaves too few pixels visible in both views."""


class DegenerateAlignmentError(EgoFlowError, ValueError):
    """Trajectory positions are rank deficient for a similarity alignment."""


class NoSegmentsError(EgoFlowError, ValueError):
    """Reference path is shorter than the smallest evaluation segment."""


class TrajectoryMismatchError(EgoFlowError, ValueError):
    """Estimate and reference trajectories cannot be paired pose by pose."""


class SpecError(EgoFlowError, ValueError):
    """A scene, motion or run specification is inconsistent."""


class FileFormatError(EgoFlowError, ValueError):
    """A binary or text file does not follow its declared format."""

    def __init__(self, path: Union[str, Path], message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class TrajectoryParseError(FileFormatError):
    """A pose file line could not be parsed."""

    def __init__(self, path: Union[str, Path], line_number: int, message: str):
        self.line_number = line_number
        super().__init__(path, f"line {line_number}: {message}")


class BundleError(EgoFlowError, ValueError):
    """A scene bundle directory is missing a required member."""

    def __init__(self, bundle: Union[str, Path], member: Optional[str], message: str):
        self.bundle = str(bundle)
        self.member = member
        super().__init__(message)
