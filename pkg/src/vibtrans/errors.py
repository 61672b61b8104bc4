"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """A physical or numerical parameter violates its contract."""


class ContractViolationError(ValueError):
    """A solver was invoked outside its domain of validity."""


class DecompositionError(RuntimeError):
    """A sum-over-poles construction failed (eigensolver breakdown)."""


class HierarchyError(RuntimeError):
    """Inconsistent auxiliary-operator bookkeeping (e.g. missing parent)."""


class StiffnessError(RuntimeError):
    """Integrator step size underflowed; the problem is too stiff."""


class NonConvergenceError(RuntimeError):
    """An iterative phase did not reach its tolerance.

    Carries the last residual so callers can report partial progress.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class UndefinedPhaseError(RuntimeError):
    """Fundamental Fourier component too small to define a phase."""


class ConfigError(ValueError):
    """Malformed run configuration; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
