"""Exception types shared across the package.

CLI exit codes: usage errors exit 2, data errors 3, numerical failures 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad value, inconsistent toggles."""


class DataError(ValueError):
    """Unusable input data: missing files, malformed annotations, too few instances."""


class NumericalError(ArithmeticError):
    """A numerical failure such as a non-finite loss during training."""


class CheckpointError(ValueError):
    """Unreadable checkpoint: bad magic, version mismatch, or corrupt payload."""
