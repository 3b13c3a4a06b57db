"""Exception types shared across the package."""


class StochLqrError(Exception):
    """Base class for package-specific failures."""


class SingularOperatorError(StochLqrError):
    """A linear operator needed by a solve is singular or numerically unusable."""


class ExcitationError(StochLqrError):
    """Collected data is not rich enough to identify the value parameters."""


class DivergenceError(StochLqrError):
    """A simulated path or an iteration left the numerically trusted region."""


class ConvergenceError(StochLqrError):
    """An iterative solver exhausted its iteration budget."""


class AdmissibilityError(StochLqrError):
    """A gain that must stabilize the system in mean square does not."""


class ConfigError(StochLqrError):
    """A run configuration failed validation before any computation started."""
