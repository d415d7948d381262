"""Exception hierarchy shared by every module."""


class BoundMarginError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BoundMarginError, ValueError):
    pass


class DimensionError(BoundMarginError, ValueError):
    pass


class FormatError(BoundMarginError, ValueError):
    """A file on disk does not match its declared container layout."""


class ContractError(BoundMarginError, RuntimeError):
    """A caller violated an operation's precondition."""


class NonFiniteError(BoundMarginError, ArithmeticError):
    pass


class TrainingAborted(BoundMarginError, RuntimeError):
    """Raised when a training run produces a non-finite loss.

    The ``diagnostic`` attribute carries the epoch, entry indices and the
    offending loss breakdown.
    """

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
