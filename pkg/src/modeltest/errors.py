"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not agree."""


class SymmetryError(ValueError):
    """A matrix expected to be symmetric (PSD) is not."""


class SingularCurvatureError(ArithmeticError):
    """The cumulant curvature a''(eta) underflowed at an evaluated point."""


class PreconditionError(ValueError):
    """An input violates a documented precondition."""


class DegenerateEstimateError(ArithmeticError):
    """An estimator produced a value outside its valid range (e.g. zero variance)."""


class MalformedTranscriptError(ValueError):
    """A protocol transcript is out of order or has an unknown message kind."""
