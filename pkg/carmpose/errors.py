"""
Exception hierarchy for carmpose.

Three families map onto CLI exit codes: configuration problems, bad input data,
and numerical failures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional


class CarmPoseError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


# ============================================================================
# Configuration
# ============================================================================

class ConfigError(CarmPoseError):
    """Invalid configuration, rejected before any work starts."""

    exit_code = 2


class InvalidGeometryError(ConfigError):
    """Acquisition geometry violates its invariants."""


class InvalidTransformError(ConfigError):
    """Rotation is not orthonormal with det +1, or values are not finite."""


class InvalidRangesError(ConfigError):
    """Capture ranges are inverted or the step is not positive."""


class UnknownFrameError(ConfigError):
    """A frame name does not appear in the chain."""


class DisconnectedChainError(ConfigError):
    """No path of links joins the two frames."""


# ============================================================================
# Data
# ============================================================================

class DataError(CarmPoseError):
    """Input data is malformed, inconsistent or unreadable."""

    exit_code = 3


@dataclass
class RecordFormatError(DataError):
    """Malformed line in a record file."""
    message: str
    line: int
    path: Optional[str] = None

    def __str__(self) -> str:
        where = f"{self.path}:" if self.path else ""
        return f"Record error at {where}L{self.line}: {self.message}"


class SampleMismatchError(DataError):
    """Dataset and prediction/pose files do not reference the same sample ids."""


class ShapeMismatchError(DataError):
    """Array shapes disagree with the grid layout or with each other."""


class EmptyInputError(DataError):
    """An operation that needs at least one element received none."""


# ============================================================================
# Numerical
# ============================================================================

class NumericalError(CarmPoseError):
    """A computation could not produce a valid result."""

    exit_code = 4


@dataclass
class BehindSourceError(NumericalError):
    """A point lies at or behind the source plane (Z <= 0)."""
    index: int
    depth: float

    def __str__(self) -> str:
        return f"Point {self.index} is behind the source (Z={self.depth:.6g} mm)"


class InsufficientCorrespondencesError(NumericalError):
    """Fewer correspondences than the solver needs."""


class DegenerateConfigurationError(NumericalError):
    """Collinear or otherwise degenerate point set."""


class NoValidPoseError(NumericalError):
    """Every candidate pose places points behind the source."""


@dataclass
class NumericalFailureError(NumericalError):
    """Non-finite values during iteration; carries the last valid iterate."""
    message: str
    last_pose: Any = field(default=None, repr=False)

    def __str__(self) -> str:
        return self.message


class InfeasibleConfigurationError(NumericalError):
    """Sampling rejects (almost) every candidate pose."""


class FiducialsOutOfFrameError(NumericalError):
    """No board fiducial projects inside the optical frame."""


class NoDetectionError(NumericalError):
    """No prediction reaches the minimum objectness."""
