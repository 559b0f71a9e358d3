"""Exception types shared across the package.

Plain ``ValueError`` is used for rejected inputs (bad shapes, out-of-range
values); the classes below mark failure modes callers may want to catch
separately.
"""


class TrainingDivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite during training."""


class DatasetParseError(ValueError):
    """Raised on malformed dataset/prior files; the message names the line."""


class UnsupportedTaskError(TypeError):
    """Raised when an analytic reference is requested for a task without
    known class-conditional densities."""
