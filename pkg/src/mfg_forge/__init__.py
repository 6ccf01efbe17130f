"""Deep-learning solver for principal-agent mean-field games with market clearing."""

from mfg_forge.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "NumericalError",
    "__version__",
]
