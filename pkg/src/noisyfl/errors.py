"""Exception types shared across the simulator."""


class NoisyFLError(Exception):
    """Base class for all simulator errors."""


class InvalidInputError(NoisyFLError, ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(NoisyFLError):
    """A configuration value or combination is unusable."""


class DivergenceError(NoisyFLError):
    """Training produced non-finite values."""


class StaleCacheError(NoisyFLError):
    """A backward pass was invoked with a cache that does not match."""


class CsvFormatError(NoisyFLError):
    """A CSV dataset file is malformed; message carries the line number."""


class DegenerateFitWarning(UserWarning):
    """A mixture fit collapsed or found no usable two-cluster structure."""
