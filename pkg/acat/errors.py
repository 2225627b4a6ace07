"""
Exception types raised across the ACAT pipeline.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class TapeError(RuntimeError):
    """Reverse-mode differentiation was requested on an unusable graph."""


class GradientCheckError(RuntimeError):
    """Finite-difference checking could not be carried out."""


class MissingGradientError(RuntimeError):
    """An optimizer step found a parameter without a gradient."""


class DatasetSpecError(ValueError):
    """A synthetic dataset specification cannot be realised."""


class RunConfigError(ValueError):
    """A run configuration is inconsistent."""


class StageError(RuntimeError):
    """A pipeline stage could not run, usually because an input artifact is missing."""
