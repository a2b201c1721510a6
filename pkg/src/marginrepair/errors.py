"""Exception types shared across the engine.

Invalid arguments raise plain ``ValueError`` everywhere; the classes below
cover failures that carry extra context a caller may want to inspect.
"""


class NumericFailureError(RuntimeError):
    """A computation produced non-finite values.

    ``step`` is the iteration/step index at which the failure was detected.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InfeasibleRepairError(RuntimeError):
    """The repair QP reported an empty feasible set.

    Carries the outer iteration index and the trace accumulated so far so
    the caller can still inspect what happened before the abort.
    """

    def __init__(self, message, iteration=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class UnconvergedTraceError(RuntimeError):
    """A certificate was requested for a repair run that did not converge."""


class InternalInvariantError(RuntimeError):
    """A guarantee that must hold by construction was observed to fail.

    Seeing this means there is a bug in the engine, not in the caller's
    inputs.
    """


class GenerationError(RuntimeError):
    """Synthetic problem generation could not meet the requested set sizes."""
