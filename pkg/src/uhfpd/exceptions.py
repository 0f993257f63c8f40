"""Exception hierarchy.

Every error raised by the package derives from :class:`PDError`. The CLI maps
the three families below to distinct exit codes.
"""


class PDError(Exception):
    """Base class for all package errors."""


class ConfigError(PDError, ValueError):
    """Invalid configuration, parameters or usage."""


class DataError(PDError, ValueError):
    """Malformed or inconsistent data."""


class LeakageDetected(PDError):
    """A test or holdout measurement was found in a training set."""


class InvalidParams(ConfigError):
    pass


class InvalidSourceClass(ConfigError):
    pass


class MissingClass(ConfigError):
    pass


class ClassMismatch(DataError):
    pass


class EmptyClass(DataError):
    pass


class MagicMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DegenerateRange(DataError):
    pass


class UnknownClass(DataError):
    pass


class BadLength(DataError):
    pass


class ShapeMismatch(DataError):
    pass
