"""Exception types shared across the package."""


class MtudaError(Exception):
    pass


class DimensionError(MtudaError, ValueError):
    """Tensor shapes or channel counts do not agree."""


class ContractError(MtudaError, RuntimeError):
    """A caller broke an operation's precondition."""


class ConfigurationError(MtudaError, ValueError):
    """Invalid architecture, training or experiment configuration."""


class ValidationError(MtudaError, ValueError):
    """A data file (mapping table, config, dataset) failed validation.

    ``rows`` holds ``(line_number, message)`` pairs when available.
    """

    def __init__(self, message, rows=None):
        self.rows = list(rows or [])
        if self.rows:
            detail = "; ".join(f"line {n}: {m}" for n, m in self.rows)
            message = f"{message}: {detail}"
        super().__init__(message)
