"""Exception hierarchy shared across the package."""


class PFLSynthError(Exception):
    """Base class for all package errors."""


class ConfigError(PFLSynthError, ValueError):
    """Invalid configuration, stage identifier, code layout or dimensions."""


class ShapeError(PFLSynthError, ValueError):
    pass


class AggregationError(PFLSynthError):
    pass


class CheckpointError(PFLSynthError):
    """Raised for malformed, truncated or incompatible checkpoint files."""


class DataError(PFLSynthError):
    pass


class ProtocolError(PFLSynthError):
    """A federation message or participant violated the round protocol."""


class TrainingDivergence(PFLSynthError):
    """Non-finite loss during local training.

    ``record`` carries the diagnostic context (site, round, step, losses).
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


class ComparisonError(PFLSynthError):
    pass
