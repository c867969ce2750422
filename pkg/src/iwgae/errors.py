"""Exception and warning types raised across the package."""


class IwGaeError(Exception):
    """Base class for all package errors."""


class SchemaError(IwGaeError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingFeatures(IwGaeError):
    pass


class Degenerate(IwGaeError):
    pass


class InvalidCount(IwGaeError, ValueError):
    pass


class EmptyInterval(IwGaeError):
    pass


class EmptyGroup(IwGaeError):
    pass


class NoEligibleGroups(IwGaeError):
    pass


class LengthMismatch(IwGaeError, ValueError):
    pass


class MissingLabels(IwGaeError):
    pass


class DegenerateBins(UserWarning):
    """Fewer distinct IW scores than requested bins; bins were merged."""
