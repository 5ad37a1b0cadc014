"""Exception hierarchy shared by all modules."""


class NimapError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(NimapError, ValueError):
    """Array shapes do not agree."""


class EmptyInputError(NimapError, ValueError):
    """An operation that needs at least one element received none."""


class GridMismatchError(NimapError, ValueError):
    """Two maps do not live on the same voxel lattice."""


class ConsistencyError(NimapError, RuntimeError):
    """Map bookkeeping is inconsistent (e.g. removing more weight than stored)."""


class PoseError(NimapError, ValueError):
    """A pose is not a proper rigid transform."""


class FormatError(NimapError, ValueError):
    """A binary or text file does not follow its expected layout."""


class ParseError(FormatError):
    """A text file has a malformed line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(NimapError, RuntimeError):
    """Optimization diverged."""

    def __init__(self, message, iteration):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
