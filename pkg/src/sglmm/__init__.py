"""Projection-based Monte Carlo maximum likelihood for spatial GLMMs.

Maximum likelihood estimation for spatial generalized linear mixed models on
continuous (Gaussian process) and discrete (Gaussian Markov random field)
spatial domains, using low-rank projection of the random effects, importance
sampling of the reduced coefficients, and Newton-Raphson optimization, plus
uncertainty quantification and kriging-style prediction.
"""

__version__ = "0.1.0"

from .exceptions import (
    BootstrapError,
    DegenerateChainError,
    InputError,
    NumericalError,
    OptimizationError,
    RankDeficiencyError,
    SglmmError,
    UnsupportedParameterError,
)
from .glm import PsiParams
from .kernels import AdjacencyGraph, MaternConfig

__all__ = [
    "AdjacencyGraph",
    "BootstrapError",
    "DegenerateChainError",
    "InputError",
    "MaternConfig",
    "NumericalError",
    "OptimizationError",
    "PsiParams",
    "RankDeficiencyError",
    "SglmmError",
    "UnsupportedParameterError",
    "__version__",
]
