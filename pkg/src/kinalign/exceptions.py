"""
Exception hierarchy for kinalign.

Every error raised by the library derives from :class:`KinalignError` so callers
(and the CLI) can catch the whole family at once.
"""

from typing import List, Optional


class KinalignError(Exception):
    """Base class for all kinalign errors."""


class ConfigError(KinalignError, ValueError):
    """Raised when a run configuration is malformed or references missing files."""


class ValidationError(KinalignError, ValueError):
    """Raised when an input violates a documented precondition."""


class GeometryError(KinalignError):
    """Base class for mesh, camera and rendering failures."""


class ParseError(GeometryError, ValueError):
    """Raised on a malformed record in an OBJ or PFM file."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class DegenerateFace(GeometryError, ValueError):
    """Raised when a face has (numerically) zero area."""


class IndexOutOfRange(GeometryError, IndexError):
    """Raised when a face references a vertex that does not exist."""


class BehindCamera(GeometryError, ValueError):
    """Raised when projecting a point at or behind the camera's near plane."""


class EmptyMesh(GeometryError, ValueError):
    """Raised when rendering a mesh without faces."""


class AllBehindCamera(GeometryError, ValueError):
    """Raised when no vertex of a mesh lies in front of the camera."""


class LengthMismatch(ValidationError):
    """Raised when a joint vector or cotangent does not match the chain."""


class DimensionMismatch(ValidationError):
    """Raised when image, mask or feature dimensions disagree."""


class EmptyList(ValidationError):
    """Raised when an aggregate is requested over no inputs."""


class UnknownExtractor(ConfigError):
    """Raised for a feature extractor kind that is not registered."""


class UnknownDomain(ConfigError):
    """Raised for a domain kind the corruption stage does not know."""


class IoError(KinalignError, OSError):
    """Raised when a dataset or result file cannot be read or written."""


class NonFiniteLoss(KinalignError, ArithmeticError):
    """Raised when the alignment loss becomes NaN or infinite.

    The loss trace accumulated up to the failure is attached for diagnosis.
    """

    def __init__(self, message: str, loss_trace: Optional[List[float]] = None):
        super().__init__(message)
        self.loss_trace = list(loss_trace or [])
