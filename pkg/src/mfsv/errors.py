"""Exception types shared across the package."""


class MfsvError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MfsvError, ValueError):
    """Inconsistent or inadmissible array dimensions."""


class NonstationaryError(MfsvError, ValueError):
    """An AR coefficient violates |phi| < 1."""


class InvalidVarianceError(MfsvError, ValueError):
    """A variance parameter is non-positive where positivity is required."""


class RotationError(MfsvError, RuntimeError):
    """The identifying rotation failed (singular leading block)."""


class DegenerateSimulationError(MfsvError, RuntimeError):
    """A simulated series is numerically unusable (non-finite or constant)."""


class NumericalDegeneracyError(MfsvError, RuntimeError):
    """All particle weights underflowed at some time step."""

    def __init__(self, t: int):
        self.t = t
        super().__init__(f"all particle weights underflowed at t={t}")


class IngestError(MfsvError, ValueError):
    """Malformed input data file."""
