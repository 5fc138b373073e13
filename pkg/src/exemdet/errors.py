"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data-contract violations exit 3, numerical failures exit 4.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class DataContractError(ValueError):
    """An artifact or input violates a documented data contract."""


class ShapeError(DataContractError):
    """Operands have incompatible shapes; the message carries both shapes."""


class NumericalError(ArithmeticError):
    """A numeric routine produced or encountered a non-finite value."""


class TrainingDivergedError(NumericalError):
    """Training hit a non-finite loss; carries the offending step index."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at training step {step}")


class MissingGradientError(RuntimeError):
    """An optimizer step found a parameter whose gradient was never populated."""

    def __init__(self, key: str):
        self.key = key
        super().__init__(f"parameter '{key}' has no gradient; "
                         f"run backward() before stepping the optimizer")
