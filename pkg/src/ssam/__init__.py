"""Self-supervised audio representation learning with selective state-space encoders."""

from .errors import (DataError, DegenerateTaskError, EvaluationError, GeometryError,
                     ParameterError, ShapeError, SsamError)

__version__ = "0.1.0"

__all__ = ["DataError", "DegenerateTaskError", "EvaluationError", "GeometryError",
           "ParameterError", "ShapeError", "SsamError", "__version__"]
