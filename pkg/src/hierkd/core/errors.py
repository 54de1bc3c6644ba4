"""Exception hierarchy shared by every hierkd module.

Each exception carries the process exit code the CLI maps it to:
1 for validation problems, 2 for backend failures, 3 for configuration errors.
"""

from __future__ import annotations

from typing import Optional


class HierKDError(Exception):
    """Base class for all hierkd errors."""

    exit_code: int = 1

    def __init__(self, message: str, *, detail: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def __str__(self) -> str:
        if self.detail:
            return f"{self.message} ({self.detail})"
        return self.message


# Validation errors (exit 1)
class ValidationFailure(HierKDError):
    exit_code = 1


class TaxonomyError(ValidationFailure):
    """Raised when a taxonomy document violates the tree invariants."""

    def __init__(self, message: str, *, node_id: Optional[str] = None, detail: Optional[str] = None):
        super().__init__(message, detail=detail)
        self.node_id = node_id


class InstanceError(ValidationFailure):
    pass


class PromptError(ValidationFailure):
    pass


class MetricError(ValidationFailure):
    pass


class TrainingError(ValidationFailure):
    """Raised when distillation or pretraining diverges."""

    def __init__(self, message: str, *, epoch: Optional[int] = None, step: Optional[int] = None, detail: Optional[str] = None):
        super().__init__(message, detail=detail)
        self.epoch = epoch
        self.step = step


# Backend errors (exit 2)
class BackendError(HierKDError):
    exit_code = 2
    retryable: bool = False
    attempts: int = 1


class TransientBackendError(BackendError):
    """Connection resets, 5xx and 429 responses. Retried with backoff."""

    retryable = True


class BackendTimeoutError(TransientBackendError):
    pass


class BackendRefusalError(BackendError):
    """The server rejected the request (4xx other than 429). Never retried."""

    def __init__(self, message: str, *, status_code: Optional[int] = None, detail: Optional[str] = None):
        super().__init__(message, detail=detail)
        self.status_code = status_code


class ReplayMissError(BackendError):
    def __init__(self, request_hash: str):
        super().__init__("request not found in replay log", detail=request_hash)
        self.request_hash = request_hash


# Configuration errors (exit 3)
class ConfigError(HierKDError):
    exit_code = 3
