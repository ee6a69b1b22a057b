# app/errors.py
from typing import Any, Dict, List, Optional


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit."""


class ContractViolation(ToolkitError, ValueError):
    """Wrong dimensions or a violated precondition."""


class ConfigurationError(ToolkitError, ValueError):
    """Invalid configuration, schema mismatch or unusable input data."""


class EmptyBufferError(ConfigurationError):
    pass


class IntegrationError(ToolkitError, FloatingPointError):
    """Physics integration produced a non-finite state."""

    def __init__(self, message: str, state: Any = None, action: Any = None):
        super().__init__(message)
        self.state = state
        self.action = action


class CapabilityError(ToolkitError, NotImplementedError):
    pass


class TrainingError(ToolkitError, ArithmeticError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateDataError(ToolkitError, ValueError):
    pass


class AdaptationError(ToolkitError):
    def __init__(self, message: str, trace: Optional[List[Any]] = None):
        super().__init__(message)
        self.trace = trace or []


class StageError(ToolkitError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
