"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or inconsistent."""
