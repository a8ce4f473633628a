"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on shapes or arguments was violated."""


class UnsupportedSizeError(ContractError):
    pass


class DegenerateInputError(ContractError):
    """Input for which the requested quantity is undefined (e.g. zero norm)."""


class NumericalAbort(ArithmeticError):
    """Non-finite values or divergence detected; carries an optional partial result."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(ValueError):
    """Invalid run configuration. ``key`` names the offending field when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
