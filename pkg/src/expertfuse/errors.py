"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes. The message names both shapes."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class ContractError(ValueError):
    """A caller violated an operation's contract (wrong mode, empty input, ...)."""


class NumericError(RuntimeError):
    """A computation produced or received non-finite values."""
