"""Exception types shared across the package."""


class KinfilterError(Exception):
    """Base class for all package errors."""


class DomainError(KinfilterError, ValueError):
    """An argument lies outside the domain of the operation."""


class SingularKernelError(KinfilterError):
    """A Gaussian covariance is numerically singular."""


class StabilityError(KinfilterError):
    """A time step violates the stability restrictions of a scheme."""


class DegenerateFlowError(KinfilterError):
    """A flow lost monotonicity in the velocity variable."""


class OutOfRangeError(KinfilterError, ValueError):
    """A query lies outside the region covered by a lattice."""


class CoercivityError(KinfilterError):
    """Coefficients violate the non-degeneracy requirement."""


class DegenerateDensityError(KinfilterError):
    """A density has (numerically) zero mass."""


class ConfigError(KinfilterError, ValueError):
    """A scenario configuration is invalid."""
