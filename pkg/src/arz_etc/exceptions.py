"""Exception hierarchy shared by every module of the package."""


class ArzEtcError(Exception):
    """Base class for all package errors."""


class DomainError(ArzEtcError, ValueError):
    """An argument lies outside the domain of a formula."""


class InfeasibleEquilibriumError(DomainError):
    """The requested equilibrium is at or beyond jam occupancy, or degenerate."""


class CalibrationError(ArzEtcError, ValueError):
    """A calibration root could not be bracketed."""


class ModelError(ArzEtcError):
    """The linearized model lost hyperbolicity or its eigenbasis is defective."""


class KernelSolverError(ArzEtcError):
    """Successive approximation of a kernel system did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class GridMismatchError(ArzEtcError, ValueError):
    """Two objects that must share a spatial grid do not."""


class StabilityError(ArzEtcError):
    """A time step would violate the CFL restriction."""


class DivergenceError(ArzEtcError):
    """The simulated state became non-finite."""


class InvariantViolation(ArzEtcError):
    """A runtime invariant (for instance ``m(t) < 0``) was broken."""


class ConfigError(ArzEtcError, ValueError):
    """A scenario configuration could not be parsed or validated."""
