"""Testing which of two data distributions a given model was fitted on,
without estimating either distribution's own minimizer."""

from .errors import (DegenerateEstimateError, DimensionError, MalformedTranscriptError,
                     PreconditionError, SingularCurvatureError, SymmetryError)
from .linalg import RankTolerance
from .models import GlmSpec, LinearModelSpec, MixtureSpec, Misspecification, Sample
from .procedures import Decision, TestOutcome

__version__ = "0.1.0"
