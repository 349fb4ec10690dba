"""Exception types shared across the package."""


class DomainError(ValueError):
    """A query point lies outside the domain of a grid or field."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-PD covariance, divergence, non-finite state)."""


class InfeasibleError(RuntimeError):
    """A set or plan required by the pipeline does not exist."""


class SafetyAbort(RuntimeError):
    """The relative state left the value-function grid during a closed-loop run."""


class ValidationError(ValueError):
    """A scenario or command-line configuration is inconsistent."""


class MissingArtifactError(FileNotFoundError):
    """A downstream stage needs an artifact an upstream stage has not produced."""
