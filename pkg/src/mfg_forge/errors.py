class MFGError(Exception):
    """Base class for all solver errors."""


class ConfigError(MFGError, ValueError):
    """Invalid configuration value or structure."""


class ContractError(MFGError, ValueError):
    """A call violated an operation's preconditions (shapes, dims, primitives)."""


class NumericalError(MFGError, ArithmeticError):
    """Non-finite values encountered during simulation or optimization."""


class CheckpointError(MFGError, OSError):
    """Corrupt, truncated, or version-mismatched checkpoint file."""
