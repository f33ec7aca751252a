"""Exception hierarchy shared by every txnet module."""


class TxNetError(Exception):
    """Base class for all txnet errors."""


class ShapeError(TxNetError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class SizeError(TxNetError, ValueError):
    """A tensor extent is zero, negative or the element count overflows."""


class SplitError(ShapeError):
    """Channel count is not divisible by the requested number of parts."""


class ContractError(TxNetError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(TxNetError, ValueError):
    """Model or stage configuration is invalid.

    ``path`` names the offending field (e.g. ``stages[2].channels``) when known.
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SelectorError(TxNetError, KeyError):
    """A feature-map tap name does not exist in the model."""

    def __init__(self, tap, available):
        self.tap = tap
        self.available = list(available)
        super().__init__(f"unknown tap {tap!r}; available taps: {', '.join(self.available)}")

    def __str__(self):
        return self.args[0]


class CheckFailure(TxNetError, AssertionError):
    """A gradient or oracle check exceeded its tolerance."""
