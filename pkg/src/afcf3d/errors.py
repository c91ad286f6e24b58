"""Exception hierarchy. Each class maps to one CLI exit code."""


class AFCFError(Exception):
    exit_code = 1


class ConfigurationError(AFCFError, ValueError):
    """Bad shapes, inconsistent specs, invalid settings."""

    exit_code = 2


class SequencingError(ConfigurationError):
    """A computation was requested before its inputs exist."""


class IngestionError(AFCFError):
    """A dataset tile is missing, mis-sized or carries a non-binary label."""

    exit_code = 3


class NumericalError(AFCFError, FloatingPointError):
    """Non-finite values appeared in checked mode or during training."""

    exit_code = 4


class GradientCheckError(AssertionError):
    def __init__(self, message, coordinate=None, analytic=None, numeric=None):
        super().__init__(message)
        self.coordinate = coordinate
        self.analytic = analytic
        self.numeric = numeric
