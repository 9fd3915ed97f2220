"""Exception types shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES).
"""


class RoomdiffError(Exception):
    """Base class for all package errors."""


class ConfigError(RoomdiffError):
    """Invalid configuration value, unknown key, or bad parameter."""


class DataError(RoomdiffError):
    """Invalid input data: out-of-range attribute, capacity overflow,
    unknown vocabulary token, failed generation budget, missing class."""


class DivergenceError(RoomdiffError):
    """Non-finite value encountered during training or sampling."""


class CheckpointError(RoomdiffError):
    """Checkpoint file is truncated, tampered, or incompatible."""
