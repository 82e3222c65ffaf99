"""Exception hierarchy shared by every module."""


class CpfError(Exception):
    """Base class for package errors."""


class DimensionError(CpfError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigurationError(CpfError, ValueError):
    """A configuration value violates its contract."""


class InputError(CpfError, ValueError):
    """Input data is malformed or violates a precondition."""


class ContractError(CpfError, RuntimeError):
    """An API precondition was violated by the caller."""


class GraphError(CpfError, RuntimeError):
    """A compute graph was reused after being consumed by backward."""


class NumericHealthError(CpfError, FloatingPointError):
    """A non-finite value was detected.

    ``checkpoint`` optionally carries the last known-good training state.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
