from typing import Optional


class FedGainError(Exception):
    """Base class for every error raised by the simulator."""


class DimensionMismatchError(FedGainError, ValueError):
    """Vectors, matrices or batches whose shapes do not agree."""


class InvalidProblemError(FedGainError, ValueError):
    """A regression problem violating its invariants (shape, symmetry, SPD)."""


class NonContractiveError(FedGainError):
    """A bound was requested for a step size with rho >= 1."""


class ConfigError(FedGainError, ValueError):
    """
    Invalid experiment configuration.

    Carries the dotted field name and, when the value came from a file, the
    source line so the CLI can point at it.
    """

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        super().__init__(message)

    def __str__(self) -> str:
        prefix = ""
        if self.line is not None:
            prefix += f"line {self.line}: "
        if self.field:
            prefix += f"{self.field}: "
        return prefix + super().__str__()


class PolicyInputError(ConfigError):
    """A policy was asked to decide without the inputs its kind requires."""
