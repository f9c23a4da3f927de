"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgument(ValueError):
    """An operation received an argument outside its precondition."""


class GenerationError(RuntimeError):
    """Synthetic sequence generation failed (e.g. the rig left the scene)."""

    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message)
        self.frame = frame


class LinearizationError(RuntimeError):
    """A residual or Jacobian evaluated to a non-finite value."""

    def __init__(self, message: str, edge=None):
        super().__init__(message)
        self.edge = edge


class SolverError(RuntimeError):
    """The reduced linear system could not be factorized."""


class ConvergenceError(RuntimeError):
    """An iterative optimizer rejected too many consecutive steps."""

    def __init__(self, message: str, trace=None, stage: str | None = None,
                 keyframe: int | None = None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
        self.stage = stage
        self.keyframe = keyframe


class OptimizationError(RuntimeError):
    """First-order map optimization hit a non-finite loss."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state
