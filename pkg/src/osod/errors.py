"""Exception hierarchy shared by all osod modules."""


class OsodError(Exception):
    """Base class for every error raised by this package."""


class MalformedBoxError(OsodError, ValueError):
    """Box with negative extent or non-finite coordinates."""


class SchemaError(OsodError, ValueError):
    """Input file is missing required keys or has the wrong shape."""


class ValidationError(OsodError, ValueError):
    """A record violates a value constraint (score range, category id, ...)."""


class DomainError(OsodError, ValueError):
    """Numeric argument outside the domain of a function."""


class ParameterError(OsodError, ValueError):
    """Invalid configuration parameter."""


class CapacityError(OsodError):
    """Not enough qualifying images to build a split.

    Attributes:
        required: number of images requested.
        available: number of qualifying images found.
    """

    def __init__(self, message, required=None, available=None):
        super().__init__(message)
        self.required = required
        self.available = available

    @property
    def shortfall(self):
        if self.required is None or self.available is None:
            return None
        return max(self.required - self.available, 0)


class UndefinedMetricError(OsodError):
    """A metric has no defined value for the given inputs."""
