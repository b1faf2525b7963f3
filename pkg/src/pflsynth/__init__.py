"""Personalized federated multi-contrast MRI synthesis on synthetic phantoms."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AggregationError,
    CheckpointError,
    ComparisonError,
    ConfigError,
    DataError,
    PFLSynthError,
    ProtocolError,
    ShapeError,
    TrainingDivergence,
)

__all__ = [
    "__version__",
    "AggregationError",
    "CheckpointError",
    "ComparisonError",
    "ConfigError",
    "DataError",
    "PFLSynthError",
    "ProtocolError",
    "ShapeError",
    "TrainingDivergence",
]
