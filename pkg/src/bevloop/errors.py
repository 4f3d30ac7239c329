"""Exception hierarchy shared across the package."""


class BevLoopError(Exception):
    """Base class for all domain errors raised by this package."""


class DimensionError(BevLoopError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(BevLoopError):
    """An operation was invoked outside its documented domain."""


class ConflictError(BevLoopError):
    """An identifier that must be unique is already present."""


class NotFoundError(BevLoopError):
    """A requested identifier is absent."""


class DegenerateDescriptorError(BevLoopError):
    """A descriptor collapsed to zero and cannot be normalized."""


class DegeneratePairError(BevLoopError):
    """An overlap score is undefined because a feature mask is empty."""


class FormatError(BevLoopError):
    """A file does not follow its declared binary or text layout."""


class PoseError(BevLoopError):
    """A pose matrix is not a valid rigid transform."""


class TrainingDivergedError(BevLoopError):
    """Training produced a non-finite loss."""
