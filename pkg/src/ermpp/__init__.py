"""Desk-scale domain-generalization training lab built on a small numpy autodiff core."""

from .errors import (
    ArchitectureError,
    CheckpointError,
    ConfigError,
    ContractError,
    ErmppError,
    LabelError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ArchitectureError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "ErmppError",
    "LabelError",
    "ShapeError",
    "__version__",
]
