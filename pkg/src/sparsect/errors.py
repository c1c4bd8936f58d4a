"""Exception types shared across the package."""


class SparseCTError(Exception):
    """Base class for all package errors."""


class ValidationError(SparseCTError, ValueError):
    """An argument violates a documented precondition."""


class UnitMismatchError(ValidationError):
    pass


class DegenerateRangeError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    pass


class ArityError(ValidationError):
    pass


class ProjectionDomainError(SparseCTError, ValueError):
    """A cone-beam point lies at or behind the source plane."""


class FormatError(SparseCTError, ValueError):
    """A binary or text file does not match its declared layout."""


class EmptyStructureError(ValidationError):
    """A structure mask selects no voxels."""
