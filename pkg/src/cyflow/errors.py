"""Exception types shared across the package."""


class CyflowError(Exception):
    """Base class for all package errors."""


class ConfigError(CyflowError):
    """Invalid or unreadable run configuration."""


class DivergenceError(CyflowError):
    """The conformal factor left the representable range (blow-up)."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class StepTooSmallError(CyflowError):
    """The stability rule drove the time step below the hard floor."""


class NonZeroMeanError(CyflowError):
    """Poisson right-hand side violates the zero-mean solvability condition."""


class NoConvergenceError(CyflowError):
    """An iterative solve stalled above its tolerance."""


class NotBalancedError(CyflowError):
    """Operation requires a vanishing torsion 1-form."""


class NotTangentError(CyflowError):
    """Variation direction is not tangent to the constraint surface."""


class IncompatibleTorsionError(CyflowError):
    """Torsion 1-form has nonzero divergence, so integrals of the
    drift Laplacian would not vanish."""


class BumpDoesNotFitError(CyflowError):
    """Bump profile radius too large for the fundamental domain."""


class ResolutionTooCoarseError(CyflowError):
    """Grid too coarse to resolve the bump annulus."""


class NotUnstableError(CyflowError):
    """Saddle experiment requires an unstable critical point."""


class CertificateFailedError(CyflowError):
    """A certified bound was violated; carries the first offending row."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyReportError(CyflowError):
    """No time slice qualified under the requested tolerance."""


class LowerBoundViolationError(CyflowError):
    """Curvature lower bound violated; carries the offending (t, min S) rows."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class SnapshotFormatError(CyflowError):
    """Malformed or mismatched binary field snapshot."""
