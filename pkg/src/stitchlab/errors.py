"""Exception types shared across stitchlab."""


class StitchLabError(Exception):
    """Base class for all stitchlab errors."""


class ConfigError(StitchLabError):
    """Invalid experiment or training configuration."""


class NumericalError(StitchLabError):
    """A computation produced or received unusable numbers."""


class InvalidInput(NumericalError, ValueError):
    pass


class ShapeMismatch(StitchLabError, ValueError):
    pass


class ZeroNorm(NumericalError):
    """A normalizing quantity (Frobenius norm, variance) is exactly zero."""


class DegenerateInput(NumericalError):
    pass


class Diverged(NumericalError):
    """Training loss became non-finite."""


class ZeroDenominator(NumericalError):
    pass


class UnknownLayer(StitchLabError, KeyError):
    pass


class MissingStitchedActs(StitchLabError, ValueError):
    pass


class BottleneckNotSupported(StitchLabError, TypeError):
    pass


class NonDivisibleShapes(StitchLabError, ValueError):
    pass


class SchemaViolation(StitchLabError, ValueError):
    pass


class FormatError(StitchLabError, ValueError):
    """A persisted file is corrupt or has the wrong magic/version."""


class NotConverged(UserWarning):
    """Iterative solver stopped at ``max_iter``; ``solution`` holds the last iterate."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution
