"""Exception hierarchy for the sglmm package."""


class SglmmError(Exception):
    """Base class for all sglmm errors."""


class InputError(SglmmError, ValueError):
    """Invalid user input: bad shapes, domains, or file contents."""


class UnsupportedParameterError(InputError):
    """A parameter value outside the supported enumeration."""


class NumericalError(SglmmError, ArithmeticError):
    """A numerical operation failed (factorization, underflow, indefiniteness).

    Carries optional diagnostic context in ``detail``.
    """

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail


class RankDeficiencyError(NumericalError):
    """A low-rank factorization retained fewer directions than requested."""


class OptimizationError(SglmmError):
    """An optimizer could not make progress."""


class DegenerateChainError(SglmmError):
    """An MCMC chain is constant or otherwise carries no information."""


class BootstrapError(SglmmError):
    """Too many bootstrap replicates failed to produce a fit."""


class NotConvergedWarning(UserWarning):
    """A fit or iterative routine stopped at its cap without converging."""
