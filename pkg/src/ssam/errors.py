"""Exception hierarchy shared by all modules."""


class SsamError(Exception):
    """Base class for errors raised by this package."""


class ParameterError(SsamError, ValueError):
    """Invalid scalar or configuration parameter."""


class ShapeError(SsamError, ValueError):
    """Array shapes are inconsistent with each other."""


class GeometryError(SsamError, ValueError):
    """Spectrogram or patch-grid geometry does not line up."""


class EvaluationError(SsamError, ArithmeticError):
    """A function evaluated to a non-finite value."""


class DataError(SsamError):
    """Input data is missing, unreadable or malformed."""


class DegenerateTaskError(SsamError, ValueError):
    """A scoring task has max == min, so normalization is undefined."""

    def __init__(self, task: str):
        super().__init__(f"task {task!r} has max_t == min_t")
        self.task = task
