"""GP-informed tracking error bounds for safe planning and control of a surface vessel."""

__version__ = "0.1.0"

from .errors import DomainError, InfeasibleError, MissingArtifactError, NumericalError, SafetyAbort, ValidationError

__all__ = [
    "__version__",
    "DomainError",
    "InfeasibleError",
    "MissingArtifactError",
    "NumericalError",
    "SafetyAbort",
    "ValidationError",
]
