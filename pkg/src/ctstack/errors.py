"""Exception hierarchy shared by every ctstack module."""

from __future__ import annotations


class CTStackError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(CTStackError, ValueError):
    """An argument is outside the operation's accepted domain."""


class GeometryMismatchError(CTStackError):
    """Two volumes (or a volume and a plan) disagree on shape."""


class FormatError(CTStackError):
    """A native volume directory is inconsistent or corrupt."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DicomError(CTStackError):
    """Base class for DICOM parsing failures."""


class NotDicomError(DicomError):
    pass


class UnsupportedEncodingError(DicomError):
    pass


class MalformedStreamError(DicomError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class AmbiguousOrderError(CTStackError):
    """Slices cannot be put in a strictly increasing order."""


class PlanMismatchError(CTStackError):
    """Slab list does not match the stack plan it claims to follow."""


class BackendFailureError(CTStackError):
    """A segmentation backend failed; ``diagnostics`` holds its captured output."""

    def __init__(self, message: str, diagnostics: str = ""):
        super().__init__(message if not diagnostics else f"{message}\n{diagnostics}")
        self.diagnostics = diagnostics
