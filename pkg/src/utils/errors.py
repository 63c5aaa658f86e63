"""
Custom exceptions for the semantic view selection toolkit
"""

from typing import Optional, Dict, Any


class ViewSelectError(Exception):
    """Base exception for all toolkit errors"""

    exit_code = 4

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}

    def __str__(self):
        if self.context:
            context_str = ", ".join([f"{k}={v}" for k, v in self.context.items()])
            return f"{self.message} [Context: {context_str}]"
        return self.message


# Configuration family (exit code 2)

class ConfigurationError(ViewSelectError):
    """Raised when a run configuration is invalid or cannot be loaded"""
    exit_code = 2


class ValidationError(ConfigurationError):
    """
    Raised when arguments or configuration values violate their constraints.
    Carries every violated field in context["violations"] when known.
    """

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None,
                 violations: Optional[list] = None):
        context = dict(context or {})
        if violations:
            context["violations"] = list(violations)
        super().__init__(message, context)
        self.violations = list(violations or [])


# Data family (exit code 3)

class DataError(ViewSelectError):
    """Raised when an input file or in-memory dataset is invalid"""
    exit_code = 3


class MalformedHeaderError(DataError):
    """Raised when a binary file header is unreadable or has the wrong magic"""
    pass


class TruncatedFileError(DataError):
    """Raised when a file ends before its declared content"""
    pass


class VersionMismatchError(DataError):
    """Raised when a file declares an unsupported format version"""
    pass


class ChecksumError(DataError):
    """Raised when a payload checksum does not match"""
    pass


class DimensionMismatchError(DataError):
    """Raised when feature vectors disagree with the declared dimension"""
    pass


class DuplicateViewError(DataError):
    """Raised when the same ViewId appears twice in a dataset"""
    pass


class MissingTopViewError(DataError):
    """Raised when a pose does not expose exactly one top view"""
    pass


class EmptyDatasetError(DataError):
    """Raised when a dataset has no records"""
    pass


class UnknownCategoryError(DataError):
    """Raised when a record or split references a category not in the dataset"""
    pass


# Computation family (exit code 4)

class ComputationError(ViewSelectError):
    """Raised when a computation cannot complete"""
    exit_code = 4


class CoverageUnreachableError(ComputationError):
    """Raised when Monte-Carlo sampling cannot reach the coverage floor"""
    pass


class TrainingDivergedError(ComputationError):
    """Raised when the regressor loss becomes non-finite"""

    def __init__(self, epoch: int, loss: float):
        super().__init__(
            f"Training loss became non-finite at epoch {epoch}",
            context={"epoch": epoch, "loss": loss}
        )
        self.epoch = epoch
        self.loss = loss


class NonFiniteActivationError(ComputationError):
    """Raised when a forward pass produces non-finite values"""
    pass


class WorldGenerationError(ComputationError):
    """Raised when a synthetic world cannot be generated"""
    pass


class SelectionError(ComputationError):
    """Raised when a view selector cannot pick a view"""
    pass


class MissingScoresError(SelectionError):
    """Raised when a score-based selector has no score for a candidate view"""
    pass


class MissingModelError(SelectionError):
    """Raised when the MODEL selector is used without a regressor"""
    pass
