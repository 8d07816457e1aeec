"""Exception types shared across the package."""


class ZakaiError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ZakaiError, ValueError):
    """Invalid user configuration (bad ranges, unknown keys, too many rebases)."""


class DegreeOverflowError(ZakaiError, ValueError):
    pass


class QuadratureError(ZakaiError):
    """Quadrature nodes do not resolve the integrand (mass falls outside the rule)."""


class GramError(ZakaiError):
    """Gram matrix is numerically singular; basis functions are nearly dependent."""

    def __init__(self, message, smallest_pivot=None):
        super().__init__(message)
        self.smallest_pivot = smallest_pivot


class FilterDivergenceError(ZakaiError):
    """A time stepper produced non-finite coefficients."""

    def __init__(self, message, t=None, step=None):
        super().__init__(message)
        self.t = t
        self.step = step


class DegenerateStateError(ZakaiError):
    """The normalising integral of the approximate density vanished."""


class RebaseError(ZakaiError):
    """Re-projection onto a relocated basis lost too much L2 mass."""


class ParticleCollapseError(ZakaiError):
    """All particle weights became zero or non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
