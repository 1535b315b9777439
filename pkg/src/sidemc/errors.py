"""Exception types shared across the package."""


class SideError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SideError):
    """The problem or run configuration is invalid."""


class NumericalError(SideError):
    """A numerical procedure failed (divergence, non-finite state, ...)."""


class EvaluationError(SideError):
    """A coefficient field could not be evaluated to a finite value."""
