"""Exceptions raised by `deepid`.

Every error derives from `DeepIdError`, and additionally from the builtin that best
describes it, so callers may catch either.
"""

from __future__ import annotations

import functools
from typing import Any


class DeepIdError(Exception):
    """Base class for all `deepid` errors."""


class ShapeError(DeepIdError, ValueError):
    """An array does not have the shape an operation requires."""


class NonFiniteError(DeepIdError, ArithmeticError):
    """An array contains NaN or infinite values."""


class NotSymmetricError(DeepIdError, ValueError):
    """A matrix that must be symmetric is not."""


class ConvergenceError(DeepIdError, ArithmeticError):
    """An iterative solver hit its iteration cap."""


class NotPositiveDefiniteError(DeepIdError, ArithmeticError):
    """A Cholesky factorization met a non-positive pivot."""


class LabelError(DeepIdError, ValueError):
    """Class indices or pair labels are invalid for the requested operation."""


class ConfigError(DeepIdError, ValueError):
    """A configuration file or value is invalid."""


class ManifestError(DeepIdError, ValueError):
    """A dataset manifest record is invalid."""

    def __init__(self, message: str, *, record: int | None = None) -> None:
        self.record = record
        self.message = message
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)

    def __reduce__(self) -> Any:
        return functools.partial(type(self), record=self.record), (self.message,)


class AlignmentError(DeepIdError, ValueError):
    """Landmarks do not determine a similarity transform."""


class DegenerateCropError(DeepIdError, ValueError):
    """A patch specification produces an empty or out-of-image crop."""


class MissingNetworkError(DeepIdError, KeyError):
    """No trained network is available for a patch."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class SingularCovarianceError(DeepIdError, ArithmeticError):
    """A covariance estimate is singular even after regularization."""


class ContainerError(DeepIdError, ValueError):
    """A tensor container file is malformed or has an unsupported version."""


class OutputExistsError(DeepIdError, FileExistsError):
    """An output file exists and overwriting was not requested."""


class TrainingDivergedError(DeepIdError, ArithmeticError):
    """A training step produced a non-finite loss or gradient."""

    def __init__(self, message: str, *, diagnostics: dict[str, Any]) -> None:
        self.diagnostics = diagnostics
        self.message = message
        details = ", ".join(f"{key}={value}" for key, value in diagnostics.items())
        super().__init__(f"{message} ({details})")

    def __reduce__(self) -> Any:
        return functools.partial(type(self), diagnostics=self.diagnostics), (self.message,)


class SelectionError(DeepIdError, RuntimeError):
    """The patch selection evaluator failed; `state` holds the partial selection."""

    def __init__(self, message: str, *, state: Any) -> None:
        self.state = state
        super().__init__(message)

    def __reduce__(self) -> Any:
        return functools.partial(type(self), state=self.state), (str(self),)


class StageError(DeepIdError, RuntimeError):
    """An experiment stage failed."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage `{stage}` failed: {cause}")

    def __reduce__(self) -> Any:
        return type(self), (self.stage, self.cause)
