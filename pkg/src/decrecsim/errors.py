"""Exception types shared across the package."""


class ParseError(ValueError):
    """Raised when an input file violates its declared format."""


class EmptyDatasetError(ValueError):
    """Raised when preprocessing filters out every interaction."""


class ContractError(ValueError):
    """Raised when an operation is called with arguments that violate its contract."""


class ConfigError(ValueError):
    """Raised for unknown, missing, or out-of-range configuration values."""
