"""Exception hierarchy shared by the tracing, design and analysis layers."""


class OpticsError(Exception):
    """Base class for every error raised by rxoptics."""


class DomainError(OpticsError, ValueError):
    """A surface profile was evaluated outside its real-valued domain."""


class NoIntersection(OpticsError):
    """A ray has no forward intersection with a surface."""


class GeometryError(OpticsError, ValueError):
    """Inconsistent directions or an unbuildable optical layout."""


class OutOfBand(OpticsError, ValueError):
    """Wavelength outside the range the dispersion model was fitted for."""


class StepLimitExceeded(OpticsError):
    """GRIN integration did not reach its exit surface."""


class DegenerateError(OpticsError, ValueError):
    """A closed-form computation has no finite solution."""


class NotConverged(OpticsError):
    """An iterative search stopped without meeting its criterion."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class InfeasibleConstraints(OpticsError):
    """The optimizer could not find a point satisfying the physical constraints."""

    def __init__(self, message, result=None, violations=None):
        super().__init__(message)
        self.result = result
        self.violations = violations or []


class InsufficientRays(OpticsError, ValueError):
    """Too few unvignetted rays to compute a statistic."""


class ConfigError(OpticsError, ValueError):
    """A design configuration failed validation."""
