"""Exponential-family conditional densities, canonical links, and starting values.

Supports Poisson responses with log link and Bernoulli responses with logit
link.  Starting values for the regression coefficients come from iteratively
reweighted least squares on the non-spatial model; the starting range
parameter is the first quartile of the pairwise distances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .exceptions import InputError, UnsupportedParameterError
from .kernels import distance_matrix
from .validation import check_design, check_positive_scalar, check_vector


class Family:
    """A response family with its canonical link.

    Instances are stateless singletons; obtain one through
    :func:`family_from_name` or the module constants ``POISSON_LOG`` and
    ``BERNOULLI_LOGIT``.
    """

    name: str

    def check_response(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def loglik(self, z: np.ndarray, eta: np.ndarray) -> float:
        raise NotImplementedError

    def mean(self, eta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def variance(self, eta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def linkinv(self, eta: np.ndarray) -> np.ndarray:
        return self.mean(eta)

    def link(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, eta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"<Family {self.name}>"


class _PoissonLog(Family):
    name = "poisson"

    def check_response(self, z):
        z = np.asarray(z, dtype=float)
        if z.size and (np.any(z < 0) or np.any(z != np.floor(z)) or not np.all(np.isfinite(z))):
            raise InputError("Poisson responses must be nonnegative integers")
        return z

    def loglik(self, z, eta):
        return float(np.sum(z * eta - np.exp(eta) - gammaln(z + 1.0)))

    def mean(self, eta):
        return np.exp(eta)

    def variance(self, eta):
        return np.exp(eta)

    def link(self, mu):
        return np.log(mu)

    def sample(self, rng, eta):
        return rng.poisson(np.exp(eta)).astype(float)


class _BernoulliLogit(Family):
    name = "bernoulli"

    def check_response(self, z):
        z = np.asarray(z, dtype=float)
        if z.size and not np.all(np.isin(z, (0.0, 1.0))):
            raise InputError("Bernoulli responses must lie in {0, 1}")
        return z

    def loglik(self, z, eta):
        # z*eta - log(1 + e^eta), with the softplus evaluated stably.
        sp = np.logaddexp(0.0, eta)
        return float(np.sum(z * eta - sp))

    def mean(self, eta):
        return expit(eta)

    def variance(self, eta):
        p = expit(eta)
        return p * (1.0 - p)

    def link(self, mu):
        return np.log(mu) - np.log1p(-mu)

    def sample(self, rng, eta):
        return (rng.uniform(size=np.shape(eta)) < expit(eta)).astype(float)


POISSON_LOG = _PoissonLog()
BERNOULLI_LOGIT = _BernoulliLogit()

_FAMILIES = {"poisson": POISSON_LOG, "bernoulli": BERNOULLI_LOGIT}


def family_from_name(name) -> Family:
    """Look up a family by name (``poisson`` or ``bernoulli``)."""
    if isinstance(name, Family):
        return name
    key = str(name).lower()
    if key not in _FAMILIES:
        raise UnsupportedParameterError(
            f"unknown family {name!r}; expected one of {sorted(_FAMILIES)}"
        )
    return _FAMILIES[key]


@dataclass(frozen=True)
class PsiParams:
    """Full model parameter vector: regression coefficients plus covariance
    parameters.

    Continuous-domain models carry ``(sigma2, phi)``; discrete-domain models
    carry ``tau``.  Variance-type entries must be positive, except that
    ``sigma2 = 0`` is accepted as the degenerate no-field boundary used when
    simulating from a fit.
    """

    beta: np.ndarray
    sigma2: float | None = None
    phi: float | None = None
    tau: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not np.all(np.isfinite(self.beta)):
            raise InputError("beta contains non-finite values")
        if self.sigma2 is not None and self.sigma2 != 0.0:
            check_positive_scalar(self.sigma2, "sigma2")
        if self.phi is not None:
            check_positive_scalar(self.phi, "phi")
        if self.tau is not None:
            check_positive_scalar(self.tau, "tau")
        if self.sigma2 is None and self.tau is None:
            raise InputError("psi must carry either sigma2 (continuous) or tau (discrete)")

    @property
    def domain(self) -> str:
        return "continuous" if self.sigma2 is not None else "discrete"

    @property
    def theta(self) -> float:
        """The variance-type parameter the score is taken with respect to."""
        return self.sigma2 if self.sigma2 is not None else self.tau

    def with_vector(self, vec: np.ndarray) -> "PsiParams":
        """Rebuild from an optimization vector ``(beta..., theta)``; phi is kept."""
        vec = np.asarray(vec, dtype=float)
        p = self.beta.shape[0]
        beta = vec[:p]
        theta = float(vec[p])
        if self.domain == "continuous":
            return PsiParams(beta=beta, sigma2=theta, phi=self.phi)
        return PsiParams(beta=beta, tau=theta)

    def as_vector(self) -> np.ndarray:
        """Optimization vector ``(beta..., theta)``; phi is handled separately."""
        return np.concatenate([self.beta, [self.theta]])

    def to_dict(self) -> dict:
        out = {"beta": self.beta.tolist()}
        for key in ("sigma2", "phi", "tau"):
            val = getattr(self, key)
            if val is not None:
                out[key] = float(val)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PsiParams":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            sigma2=d.get("sigma2"),
            phi=d.get("phi"),
            tau=d.get("tau"),
        )


def conditional_loglik(z, eta, family) -> float:
    """Sum of conditional log densities of the responses given the linear predictor."""
    family = family_from_name(family)
    z = family.check_response(z)
    eta = check_vector(eta, n=z.shape[0], name="eta")
    return family.loglik(z, eta)


def conditional_mean_variance(eta, family) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and variance of the response at linear predictor ``eta``."""
    family = family_from_name(family)
    eta = np.asarray(eta, dtype=float)
    return family.mean(eta), family.variance(eta)


@dataclass(frozen=True)
class IrlsResult:
    """Starting-value fit of the non-spatial model."""

    beta: np.ndarray
    converged: bool
    n_iter: int
    working_residual_var: float


def irls_initial_estimates(z, X, offset=None, family="poisson", *,
                           tol: float = 1e-8, max_iter: int = 50) -> IrlsResult:
    """Iteratively reweighted least squares for the non-spatial model.

    Starts from zero coefficients with a mean-adjusted intercept when a
    constant column is present, and iterates the standard weighted
    least-squares update until ``max |delta beta| < tol`` or ``max_iter``
    sweeps.  On divergence or separation the best iterate reached is
    returned with ``converged=False`` and a warning.

    Returns
    -------
    IrlsResult
        Coefficients, convergence flag, iteration count, and the variance of
        the final working residuals (used to seed covariance parameters).
    """
    family = family_from_name(family)
    z = family.check_response(z)
    n = z.shape[0]
    X = check_design(X, n=n)
    p = X.shape[1]
    offset = np.zeros(n) if offset is None else check_vector(offset, n=n, name="offset")

    beta = np.zeros(p)
    const_cols = np.nonzero(np.ptp(X, axis=0) < 1e-12)[0]
    if const_cols.size:
        j = const_cols[0]
        zbar = float(np.mean(z))
        if family.name == "poisson":
            target = np.log(max(zbar, 1e-8))
        else:
            pbar = min(max(zbar, 1.0 / (n + 2.0)), 1.0 - 1.0 / (n + 2.0))
            target = float(np.log(pbar) - np.log1p(-pbar))
        beta[j] = (target - float(np.mean(offset))) / X[0, j]

    best = beta.copy()
    best_ll = family.loglik(z, X @ beta + offset)
    cur_ll = best_ll
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta + offset
        mu = family.mean(eta)
        w = family.variance(eta)
        w = np.maximum(w, 1e-10)
        resid = (z - mu) / w
        # Working response for the weighted least-squares step.
        y_work = (eta - offset) + resid
        WX = X * w[:, None]
        try:
            new_beta = np.linalg.solve(X.T @ WX, WX.T @ y_work)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(new_beta)):
            break
        # Halve overshooting updates back toward the current iterate.
        ll = family.loglik(z, X @ new_beta + offset)
        for _ in range(25):
            if np.isfinite(ll) and ll >= cur_ll - 1e-10 * (1 + abs(cur_ll)):
                break
            new_beta = 0.5 * (new_beta + beta)
            ll = family.loglik(z, X @ new_beta + offset)
        if np.isfinite(ll) and ll >= best_ll:
            best_ll = ll
            best = new_beta.copy()
        step = np.max(np.abs(new_beta - beta))
        beta = new_beta
        cur_ll = ll
        if step < tol:
            converged = True
            break

    if not converged:
        warnings.warn(
            "IRLS did not converge; returning the best iterate reached",
            stacklevel=2,
        )
        beta = best

    eta = X @ beta + offset
    mu = family.mean(eta)
    w = np.maximum(family.variance(eta), 1e-10)
    work_resid = (z - mu) / w
    return IrlsResult(
        beta=beta,
        converged=converged,
        n_iter=it,
        working_residual_var=float(np.var(work_resid)),
    )


def initial_phi(coords) -> float:
    """First quartile of the pairwise Euclidean distances between sites.

    Uses linear interpolation between order statistics of the off-diagonal
    lower-triangle distance multiset.
    """
    d = distance_matrix(coords)
    n = d.shape[0]
    if n < 2:
        raise InputError("at least two sites are required for a range starting value")
    tri = d[np.tril_indices(n, k=-1)]
    return float(np.quantile(tri, 0.25))
