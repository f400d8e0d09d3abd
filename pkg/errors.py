"""
Exception hierarchy for the Shelf WSOL pipeline.

Library modules raise these; only the CLI turns them into exit codes.
"""

from pathlib import Path
from typing import Optional, Union


class ShelfLocError(Exception):
    """Base class for every pipeline error."""


class InvalidInputError(ShelfLocError, ValueError):
    """An argument violates an operation's precondition."""


class DegenerateBoxError(InvalidInputError):
    """A box has zero area, or collapses to zero area after clipping."""


class ManifestLoadError(ShelfLocError):
    """A dataset manifest could not be loaded."""

    def __init__(self, message: str, record: Optional[Union[str, Path]] = None):
        self.record = str(record) if record is not None else None
        if record is not None:
            message = f"{message} [{record}]"
        super().__init__(message)


class SamplingExhaustedError(ShelfLocError):
    """Rejection sampling gave up before producing the requested count."""

    def __init__(self, requested: int, produced: int, attempts: int):
        self.requested = requested
        self.produced = produced
        self.attempts = attempts
        super().__init__(
            f"Background sampling exhausted: {produced}/{requested} patches "
            f"after {attempts} attempts"
        )


class StratificationError(InvalidInputError):
    """A class cannot be split across train and validation."""


class ConfigurationError(ShelfLocError):
    """A model or pipeline configuration is inconsistent."""


class TrainingFailureError(ShelfLocError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


class GenerationError(ShelfLocError):
    """A synthetic shelf could not be generated."""


class EvaluationError(ShelfLocError):
    """Evaluation has nothing to score."""


class CheckpointError(ShelfLocError):
    """A checkpoint file is missing, unreadable or of the wrong kind."""
