"""Exceptions for mixexpo."""

from typing import Optional, Any

import httpx
from pydantic import ValidationError

__all__ = [
    'MixExpoError',
    'ShapeError',
    'ConfigError',
    'ConfigValidationError',
    'PerceptualWeightsError',
    'WeightsDownloadError',
    'CheckpointError',
    'DatasetError',
    'TrainingDivergedError',
]


class MixExpoError(Exception):
    """Base exception for all mixexpo-related errors."""

    def __init__(self, message: str, details: Optional[dict[str, Any]] = None) -> None:
        """Catch this to handle any failure the library reports on purpose.

        Subclasses add structured context; everything also lands in details.

        Args:
            message: What went wrong, in one line
            details: Extra context for logs and error reports
        """
        super().__init__(message)
        self.details = details or {}


class ShapeError(MixExpoError, ValueError):
    """Raised when a tensor argument has the wrong shape or size."""

    def __init__(
        self,
        message: str,
        expected: Optional[tuple[int, ...]] = None,
        actual: Optional[tuple[int, ...]] = None,
    ) -> None:
        """Raised when tensors don't line up.

        Args:
            message: What went wrong, in one line
            expected: The shape that was expected, if there is a single one
            actual: The shape that was received
        """
        super().__init__(message, {'expected': expected, 'actual': actual})
        self.expected = expected
        self.actual = actual


class ConfigError(MixExpoError):
    """Raised when a configuration is internally inconsistent."""

    def __init__(self, message: str, field: Optional[str] = None) -> None:
        """Raised when configuration values can't work together.

        Args:
            message: What went wrong, in one line
            field: The offending configuration key, if there is one
        """
        super().__init__(message, {'field': field})
        self.field = field


class ConfigValidationError(ConfigError):
    """Raised when configuration data doesn't validate against its schema."""

    def __init__(
        self,
        model_class: type,
        validation_error: ValidationError,
        raw_data: Optional[dict] = None,
    ) -> None:
        """Raised when a config model fails to validate.

        Keeps pydantic's ValidationError alongside the raw key-value data,
        so the caller can tell which file or flag held the bad value.

        Args:
            model_class: The config model that failed validation
            validation_error: A pydantic validation error explaining what failed to validate
            raw_data: The data that failed to validate
        """
        message = f'Invalid {model_class.__name__}: {validation_error}'
        super().__init__(message)
        self.model_class = model_class
        self.validation_error = validation_error
        self.raw_data = raw_data


class PerceptualWeightsError(MixExpoError):
    """Raised when the perceptual extractor weights can't be used."""

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        """Raised when the weight file is missing, unreadable or fails its hash check.

        Args:
            message: What went wrong, in one line
            path: The weight file that was requested
        """
        super().__init__(message, {'path': path})
        self.path = path


class WeightsDownloadError(MixExpoError):
    """HTTP-related errors when downloading perceptual weights."""

    def __init__(
        self, message: str, status_code: int, response: Optional[httpx.Response] = None
    ) -> None:
        """Raised when the weight host answers with a failure status.

        Args:
            message: What went wrong, in one line
            status_code: The return code from upstream
            response: Optional upstream httpx.Response object, if any
        """
        super().__init__(message)
        self.status_code = status_code
        self.response = response


class CheckpointError(MixExpoError):
    """Raised when a checkpoint can't be written or restored."""

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        """Raised for truncated archives, format-version or config mismatches.

        Args:
            message: What went wrong, in one line
            path: The checkpoint path involved
        """
        super().__init__(message, {'path': path})
        self.path = path


class DatasetError(MixExpoError):
    """Raised when paired data can't be assembled."""

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        """Raised when images can't be read, directories don't pair up or a crop doesn't fit.

        Args:
            message: What went wrong, in one line
            path: The directory or file involved, if any
        """
        super().__init__(message, {'path': path})
        self.path = path


class TrainingDivergedError(MixExpoError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, breakdown: dict[str, float]) -> None:
        """Raised with the loss breakdown of the offending step.

        Args:
            step: The optimizer step that produced the non-finite loss
            breakdown: Named loss components at that step
        """
        terms = ', '.join(f'{name}={value:.6g}' for name, value in breakdown.items())
        super().__init__(f'Non-finite loss at step {step}: {terms}', breakdown)
        self.step = step
        self.breakdown = breakdown
