class ElfError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ElfError, ValueError):
    pass


class ParameterError(ElfError, ValueError):
    pass


class NumericError(ElfError, ArithmeticError):
    pass


class FormatError(ElfError, ValueError):
    """A file on disk does not match the expected layout."""


class ConfigError(ElfError, ValueError):
    pass


class MetricError(ElfError, ValueError):
    """A metric is undefined for the given confusion matrix."""
