"""Shared exception types."""


class UsgenError(Exception):
    """Base class for errors raised by this package."""


class NumericsError(UsgenError):
    """A computation produced non-finite values or failed to converge."""


class ConfigError(UsgenError):
    """Invalid, unknown, or inconsistent configuration values."""
