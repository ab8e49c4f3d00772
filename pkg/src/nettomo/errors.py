"""Exception and warning types raised across the package."""


class InfeasibleError(ValueError):
    """Counter values cannot be produced by any nonnegative route vector."""


class NonConvergence(RuntimeError):
    """Iterative proportional fitting stopped before reaching tolerance.

    The best iterate is kept on ``x`` and its worst relative constraint
    violation on ``violation`` so callers can decide whether to use it.
    """

    def __init__(self, message, x=None, violation=float("nan")):
        super().__init__(message)
        self.x = x
        self.violation = violation


class NonFiniteLikelihood(FloatingPointError):
    pass


class OptFailed(RuntimeError):
    """A window fit failed; ``best`` holds the best parameters seen."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateEnsemble(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class MissingTotals(KeyError):
    pass


class ShapeMismatch(ValueError):
    pass


class NegativeEntry(ValueError):
    pass


class RankDeficientWarning(UserWarning):
    pass
