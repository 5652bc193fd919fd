"""Exception types shared across the package.

CLI exit codes map onto these: ConfigError -> 2, FormatError -> 3,
NumericalAbort -> 4.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over a single-element population."""


class LabelError(IndexError):
    """Class label outside ``[0, num_classes)``."""


class ConfigError(ValueError):
    """Invalid run configuration."""


class FormatError(ValueError):
    """Malformed dataset, snapshot or CSV input."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
