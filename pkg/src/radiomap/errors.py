"""Exception hierarchy shared by all modules."""


class RadiomapError(Exception):
    """Base class for every error raised by this package."""


class MalformedInputError(RadiomapError, ValueError):
    """An input file does not parse under its declared format."""


class StructuralError(RadiomapError, ValueError):
    """An input parses but its parts disagree (e.g. dims vs payload)."""


class DomainError(RadiomapError, ValueError):
    """An argument is outside the domain of the operation."""


class ConflictError(RadiomapError):
    """A terminal collection state would be overwritten."""


class DegenerateSceneError(RadiomapError):
    """The scene geometry cannot support the requested query."""


class EmptyRegionError(RadiomapError):
    """A region has no reachable free space for waypoints."""


class NumericFaultError(RadiomapError, ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""


class IncompatibleCheckpointError(RadiomapError):
    """A checkpoint cannot be loaded into the current schema."""


class DivergenceError(RadiomapError):
    """Training produced a non-finite loss."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
