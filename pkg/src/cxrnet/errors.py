"""Exception types shared across the package."""


class CxrNetError(Exception):
    """Base class for every error raised by cxrnet."""


class InvalidArgumentError(CxrNetError, ValueError):
    pass


class ShapeError(CxrNetError, ValueError):
    pass


class NumericError(CxrNetError, ArithmeticError):
    pass


class FormatError(CxrNetError, ValueError):
    pass


class ConfigError(CxrNetError, ValueError):
    pass


class ArtifactIOError(CxrNetError, OSError):
    """Raised for unreadable, truncated or corrupted files."""
