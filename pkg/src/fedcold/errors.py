"""Exception types shared across the package."""


class FedcoldError(Exception):
    """Base class for all package errors."""


class ConfigError(FedcoldError):
    """Invalid configuration value, dimension mismatch, or bad argument."""


class DataFormatError(FedcoldError):
    """Malformed or inconsistent input/output file."""


class NumericsError(FedcoldError):
    """Non-finite values or a failed numeric diagnostic."""
