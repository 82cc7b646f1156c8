"""Exception hierarchy shared across the package."""


class InstanceError(ValueError):
    """Base class for malformed instance data."""


class ParseError(InstanceError):
    """The instance file could not be decoded or is missing required keys."""


class DimensionMismatchError(InstanceError):
    pass


class ProbabilitySumError(InstanceError):
    pass


class UnboundedVariableError(InstanceError):
    pass


class LipschitzConstantError(InstanceError):
    """A declared Lipschitz constant is non-positive or not finite."""


class StageCountError(InstanceError):
    pass


class LipschitzViolationError(RuntimeError):
    """A generated cut has a subgradient larger than the declared constant.

    This almost always means ``M_y`` or ``M_b`` in the instance is too small.
    """


class RecourseInfeasibleError(RuntimeError):
    """A stage problem is infeasible, i.e. relatively complete recourse fails."""


class NumericalError(RuntimeError):
    pass


class CapExceededError(RuntimeError):
    """An iteration cap was hit before the requested tolerance was reached.

    The partially converged result is attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ToleranceGuardError(ValueError):
    """Benders tolerance violates ``epsilon > 2 * delta * sum(pi_i)``."""


class NotFittedError(RuntimeError):
    pass


class MasterInfeasibleError(InstanceError):
    """The relaxed master problem has no feasible point."""


class MissingCutError(RuntimeError):
    """The relaxed master is unbounded because some node has no cut yet."""


class EmptyStoreError(RuntimeError):
    """An oracle was queried before any exact solve was recorded."""
