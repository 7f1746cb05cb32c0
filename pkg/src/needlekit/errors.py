"""Exception types raised across needlekit."""


class NeedleKitError(Exception):
    """Base class for all needlekit errors."""


class InvalidInput(NeedleKitError, ValueError):
    """An argument violates an operation's precondition."""


class FormatError(NeedleKitError, ValueError):
    """A file or document does not conform to its format.

    ``source`` names the offending file and ``field`` the offending field
    (a JSON path, byte offset, ...), when known.
    """

    def __init__(self, message: str, source: str | None = None, field: str | None = None):
        self.source = source
        self.field = field
        parts = [p for p in (source, field) if p]
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class InitializationError(NeedleKitError):
    """A reconstruction technique could not be initialised on the input."""


class ConfigInfeasible(NeedleKitError):
    """A phantom configuration cannot be satisfied."""
