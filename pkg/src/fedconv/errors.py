"""Exception hierarchy shared by every fedconv module."""


class FedConvError(Exception):
    """Base class for all errors raised by fedconv."""


class ConfigurationError(FedConvError, ValueError):
    """Inconsistent shapes, plans or experiment settings."""


class UsageError(FedConvError, ValueError):
    """An API was called in a state or with arguments it does not support."""


class InputError(FedConvError, ValueError):
    """Data passed to an operation is out of its valid domain."""


class NumericalError(FedConvError, ArithmeticError):
    """NaN/Inf or a degenerate quantity such as a zero-norm direction."""


class FormatError(FedConvError, ValueError):
    """A file on disk does not follow the expected binary layout."""
