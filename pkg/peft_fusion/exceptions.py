import logging
import time
import uuid
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class ErrorCategory(Enum):
    SHAPE = "shape"
    NUMERICAL = "numerical"
    GRAPH = "graph"
    CONFIG = "config"
    USAGE = "usage"
    DATA = "data"
    CHECKPOINT = "checkpoint"
    FUSION = "fusion"
    TRAINING = "training"
    UNKNOWN = "unknown"


class ErrorSeverity(Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


@dataclass
class ErrorContext:
    error_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    timestamp: float = field(default_factory=time.time)
    component: str | None = None
    step: int | None = None
    language: str | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "error_id": self.error_id,
            "timestamp": self.timestamp,
            "component": self.component,
            "step": self.step,
            "language": self.language,
            "metadata": self.metadata,
        }


@dataclass
class ErrorResponse:
    error_code: str
    message: str
    category: ErrorCategory
    severity: ErrorSeverity
    context: ErrorContext
    details: dict[str, Any] | None = None
    exit_code: int = EXIT_RUNTIME

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "error",
            "error_code": self.error_code,
            "message": self.message,
            "category": self.category.value,
            "severity": self.severity.value,
            "error_id": self.context.error_id,
            "exit_code": self.exit_code,
            "details": self.details or {},
        }


class BaseError(Exception, ABC):
    _logger = logging.getLogger("peft_fusion.exceptions")

    def __init__(
        self,
        message: str,
        error_code: str,
        category: ErrorCategory,
        severity: ErrorSeverity,
        context: ErrorContext | None = None,
        details: dict[str, Any] | None = None,
        cause: Exception | None = None,
        exit_code: int = EXIT_RUNTIME,
    ):
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.category = category
        self.severity = severity
        self.context = context or ErrorContext()
        self.details = details or {}
        self.cause = cause
        self.exit_code = exit_code

        if severity in (ErrorSeverity.CRITICAL, ErrorSeverity.HIGH):
            self._log_error()

    def _log_error(self) -> None:
        log_data = {
            "error_code": self.error_code,
            "category": self.category.value,
            "severity": self.severity.value,
            "error_message": self.message,
            "context": self.context.to_dict(),
            "details": self.details,
        }

        if self.cause:
            log_data["cause"] = str(self.cause)

        if self.severity == ErrorSeverity.CRITICAL:
            self._logger.critical("Critical error occurred", extra=log_data)
        else:
            self._logger.error("High severity error occurred", extra=log_data)

    def to_response(self) -> ErrorResponse:
        return ErrorResponse(
            error_code=self.error_code,
            message=self.message,
            category=self.category,
            severity=self.severity,
            context=self.context,
            details=self.details,
            exit_code=self.exit_code,
        )

    @abstractmethod
    def is_usage_error(self) -> bool:
        pass


class ShapeError(BaseError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, message: str, error_code: str = "SHAPE_MISMATCH", **kwargs):
        super().__init__(
            message=message,
            error_code=error_code,
            category=ErrorCategory.SHAPE,
            severity=ErrorSeverity.LOW,
            **kwargs,
        )

    def is_usage_error(self) -> bool:
        return False


class NumericalError(BaseError, ArithmeticError):
    """Non-finite value produced by a forward operation or a loss."""

    def __init__(
        self,
        message: str,
        error_code: str = "NUMERICAL_OVERFLOW",
        severity: ErrorSeverity = ErrorSeverity.MEDIUM,
        **kwargs,
    ):
        super().__init__(
            message=message,
            error_code=error_code,
            category=ErrorCategory.NUMERICAL,
            severity=severity,
            **kwargs,
        )

    def is_usage_error(self) -> bool:
        return False


class GraphError(BaseError, RuntimeError):
    """Misuse of the differentiation tape (non-scalar loss, detached loss)."""

    def __init__(self, message: str, error_code: str = "GRAPH_ERROR", **kwargs):
        super().__init__(
            message=message,
            error_code=error_code,
            category=ErrorCategory.GRAPH,
            severity=ErrorSeverity.LOW,
            **kwargs,
        )

    def is_usage_error(self) -> bool:
        return False


class ConfigError(BaseError, ValueError):
    def __init__(self, message: str, key: str | None = None, **kwargs):
        details = kwargs.pop("details", None) or {}
        if key is not None:
            details["key"] = key
        super().__init__(
            message=message,
            error_code="CONFIG_INVALID",
            category=ErrorCategory.CONFIG,
            severity=ErrorSeverity.LOW,
            details=details,
            exit_code=EXIT_USAGE,
            **kwargs,
        )
        self.key = key

    def is_usage_error(self) -> bool:
        return True


class UsageError(BaseError, ValueError):
    """Bad command-line usage: unknown method, missing flag, wrong checkpoint kind."""

    def __init__(self, message: str, error_code: str = "USAGE_ERROR", **kwargs):
        super().__init__(
            message=message,
            error_code=error_code,
            category=ErrorCategory.USAGE,
            severity=ErrorSeverity.LOW,
            exit_code=EXIT_USAGE,
            **kwargs,
        )

    def is_usage_error(self) -> bool:
        return True


class DataError(BaseError, ValueError):
    def __init__(
        self,
        message: str,
        error_code: str = "DATA_INVALID",
        line: int | None = None,
        **kwargs,
    ):
        details = kwargs.pop("details", None) or {}
        if line is not None:
            details["line"] = line
        super().__init__(
            message=message,
            error_code=error_code,
            category=ErrorCategory.DATA,
            severity=ErrorSeverity.MEDIUM,
            details=details,
            exit_code=EXIT_USAGE,
            **kwargs,
        )
        self.line = line

    def is_usage_error(self) -> bool:
        return True


class CheckpointError(BaseError, RuntimeError):
    def __init__(
        self,
        message: str,
        error_code: str = "CHECKPOINT_ERROR",
        severity: ErrorSeverity = ErrorSeverity.HIGH,
        **kwargs,
    ):
        super().__init__(
            message=message,
            error_code=error_code,
            category=ErrorCategory.CHECKPOINT,
            severity=severity,
            **kwargs,
        )

    def is_usage_error(self) -> bool:
        return False


class ManifestError(CheckpointError):
    def __init__(self, message: str, **kwargs):
        super().__init__(message, error_code="CHECKPOINT_MANIFEST_CORRUPT", **kwargs)


class ChecksumError(CheckpointError):
    def __init__(self, message: str, **kwargs):
        super().__init__(message, error_code="CHECKPOINT_CHECKSUM_MISMATCH", **kwargs)


class UnsupportedVersionError(CheckpointError):
    def __init__(self, message: str, **kwargs):
        super().__init__(message, error_code="CHECKPOINT_VERSION_UNSUPPORTED", **kwargs)


class CheckpointShapeError(CheckpointError):
    def __init__(self, message: str, **kwargs):
        super().__init__(message, error_code="CHECKPOINT_SHAPE_MISMATCH", **kwargs)


class MaskError(BaseError, ValueError):
    """A fusion mask would leave no adapter attending, or names an unknown tag."""

    def __init__(self, message: str, error_code: str = "FUSION_MASK_INVALID", **kwargs):
        super().__init__(
            message=message,
            error_code=error_code,
            category=ErrorCategory.FUSION,
            severity=ErrorSeverity.LOW,
            exit_code=EXIT_USAGE,
            **kwargs,
        )

    def is_usage_error(self) -> bool:
        return True


class TrainingError(BaseError, RuntimeError):
    def __init__(
        self,
        message: str,
        error_code: str = "TRAINING_FAILED",
        severity: ErrorSeverity = ErrorSeverity.HIGH,
        **kwargs,
    ):
        super().__init__(
            message=message,
            error_code=error_code,
            category=ErrorCategory.TRAINING,
            severity=severity,
            **kwargs,
        )

    def is_usage_error(self) -> bool:
        return False


def create_error_context(
    component: str | None = None,
    step: int | None = None,
    language: str | None = None,
    **metadata,
) -> ErrorContext:
    return ErrorContext(
        component=component,
        step=step,
        language=language,
        metadata=metadata,
    )
