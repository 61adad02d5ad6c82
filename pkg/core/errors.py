"""
Error types for the DIRL toolkit
Every error derives from DirlError and from the builtin a caller would expect
"""

from dataclasses import dataclass, field


class DirlError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DirlError, ValueError):
    """Invalid setting, unknown name or inconsistent configuration."""


class ShapeError(DirlError, ValueError):
    """Operands with non-conformable shapes."""

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: shapes {self.left} and {self.right} are not conformable"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ContractError(DirlError, ValueError):
    """A documented pre-condition was violated by the caller."""


class NonFiniteError(DirlError, ArithmeticError):
    """NaN or Inf entered or left a differentiable operation."""


class DegenerateFeatureError(DirlError, ArithmeticError):
    """A feature row has (near) zero norm and cannot be normalized."""


class ShortageError(DirlError, ValueError):
    """A class has fewer examples than requested."""

    def __init__(self, class_label: int, available: int, requested: int):
        self.class_label = class_label
        self.available = available
        self.requested = requested
        super().__init__(
            f"class {class_label} has {available} examples, {requested} requested"
        )


@dataclass
class DiagnosticSnapshot:
    """State captured when training aborts."""
    iteration: int
    term: str
    reason: str
    parameter_norms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "term": self.term,
            "reason": self.reason,
            "parameter_norms": dict(self.parameter_norms),
        }


class TrainingAborted(DirlError, RuntimeError):
    """Training stopped on a non-finite or degenerate quantity."""

    def __init__(self, snapshot: DiagnosticSnapshot):
        self.snapshot = snapshot
        super().__init__(
            f"training aborted at iteration {snapshot.iteration} "
            f"in term '{snapshot.term}': {snapshot.reason}"
        )
