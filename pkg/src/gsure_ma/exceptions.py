"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when array extents or channel counts do not line up."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


class ContainerError(ValueError):
    """Malformed TNSR container or mismatched parameter record."""


class TruncationError(ContainerError):
    def __init__(self, record, expected, available):
        self.record = record
        self.expected = expected
        self.available = available
        super().__init__(
            f"record {record!r} truncated: payload needs {expected} bytes, "
            f"{available} available"
        )


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value)."""


class NumericError(ArithmeticError):
    """Non-finite loss or parameters encountered during training."""
