"""Monte Carlo maximum likelihood for projected spatial GLMMs.

The marginal likelihood ratio against a fixed importance parameter is
approximated by an average over sampled basis coefficients:

    lhat(psi) = log( (1/K) sum_k exp( logjoint(psi, delta_k)
                                      - logjoint(psi_ref, delta_k) ) )

where the ``delta_k`` are Metropolis draws from the conditional density of
the coefficients at ``psi_ref``.  ``lhat`` is exactly zero at ``psi_ref``.
The gradient and Hessian over the regression coefficients and the
variance-type parameter are available in closed form as self-normalized
importance-weighted averages, which drives a Newton ascent; the range
parameter of continuous-domain models has no closed-form score and is
profiled numerically, rebuilding the projection basis at each candidate.

Fitting proceeds in two phases: an iterative search that walks the
importance parameter toward the maximizer on short chains, then a final
long-chain maximization at the located importance parameter.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .exceptions import InputError, NumericalError, OptimizationError
from .glm import (
    Family,
    PsiParams,
    family_from_name,
    initial_phi,
    irls_initial_estimates,
)
from .kernels import JITTER, AdjacencyGraph, build_precision, correlation_matrix
from .projection import DROP_TOL, BasisBuilder, ProjectionBasis, moran_basis
from .sampler import ChainConfig, DeltaChain, batch_means_ase, make_sglmm_target, run_chain
from .rng import substream_seed
from .validation import check_coordinates, check_design, check_vector

#: One-sided 5% standard normal quantile used by the outer stopping rule.
Z_05 = 1.644854

_CHUNK = 2048
_LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McmlConfig:
    """Fit settings shared by the continuous and discrete drivers.

    The effective-sample-size targets are multiples of the basis rank: short
    search chains stop at ``ess_search_mult * m`` and the final approximation
    chain at ``ess_final_mult * m``.  ``proposal_sd="auto"`` scales the
    isotropic random-walk step once per chain from a curvature summary of the
    target at the coefficient prior mode; ``thin="auto"`` stores roughly
    ``stored_mult`` draws per unit of target ESS, inferring the stride from
    the previous chain of the same fit.
    """

    m: int = 50
    family: str = "poisson"
    nu: float = 2.5
    restricted: bool = False
    ess_search_mult: float = 3.0
    ess_final_mult: float = 20.0
    epsilon: float = 0.5
    outer_cap: int = 50
    newton_tol: float = 1e-6
    newton_max_iter: int = 100
    phi_grid: tuple = (0.8, 0.9, 1.0, 1.1, 1.25)
    phi_bounds_factor: float = 4.0
    phi_tol_rel: float = 1e-3
    phi_max: float | str = "auto"
    proposal_sd: float | str = "auto"
    burn_in: int = 1000
    max_chain_iterations: int = 2_000_000
    thin: int | str = "auto"
    stored_mult: float = 4.0
    exact_eig_threshold: int = 1000
    force_exact_eig: bool = False
    nystrom_oversample: int | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            out[name] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "McmlConfig":
        kwargs = dict(d)
        if "phi_grid" in kwargs:
            kwargs["phi_grid"] = tuple(kwargs["phi_grid"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Joint density
# ---------------------------------------------------------------------------


def _penalty_logdet(G: np.ndarray) -> float:
    """Pseudo log determinant of a PSD penalty, dropping numerically null directions."""
    vals = np.linalg.eigvalsh(0.5 * (G + G.T))
    top = max(vals.max(), 0.0)
    kept = vals[vals > DROP_TOL * top] if top > 0 else vals[:0]
    return float(np.sum(np.log(kept)))


def _prior_terms(psi: PsiParams, q: np.ndarray, m: int, mqm_logdet: float | None):
    """Log prior density of the coefficients; ``q`` is the quadratic form per sample."""
    if psi.domain == "continuous":
        s2 = psi.sigma2
        return -0.5 * m * (_LOG_2PI + np.log(s2)) - 0.5 * q / s2
    tau = psi.tau
    const = -0.5 * m * _LOG_2PI + 0.5 * (mqm_logdet or 0.0)
    return 0.5 * m * np.log(tau) - 0.5 * tau * q + const


def log_joint(delta, z, X, basis: ProjectionBasis, psi: PsiParams, family,
              domain: str | None = None, offset=None) -> float:
    """Log joint density of the data and one coefficient vector.

    The conditional log likelihood of the responses plus the full prior log
    density of the coefficients, including the normalizing terms that depend
    on the variance-type parameter.
    """
    family = family_from_name(family)
    delta = check_vector(delta, n=basis.rank, name="delta")
    z = family.check_response(z)
    if domain is not None and domain != psi.domain:
        raise InputError(f"domain {domain!r} conflicts with psi ({psi.domain})")
    n = z.shape[0]
    eta = X @ psi.beta + basis.M @ delta
    if offset is not None:
        eta = eta + check_vector(offset, n=n, name="offset")
    if psi.domain == "continuous":
        q = float(delta @ delta)
        logdet = None
    else:
        if basis.mqm is None:
            raise InputError("discrete-domain joint requires a basis with 'mqm'")
        q = float(delta @ basis.mqm @ delta)
        logdet = basis.mqm_logdet
        if logdet is None:
            logdet = _penalty_logdet(basis.mqm)
    prior = _prior_terms(psi, np.asarray(q), basis.rank, logdet)
    return family.loglik(z, eta) + float(prior)


# ---------------------------------------------------------------------------
# Monte Carlo objective
# ---------------------------------------------------------------------------


@dataclass
class McObjective:
    """A fixed sample set with everything precomputed for fast evaluation.

    ``cached_ref`` holds the per-sample log joint at the importance parameter
    ``psi_tilde``; evaluating the objective at ``psi_tilde`` therefore gives
    exactly zero.  ``V`` caches the basis expansion of every sample so that
    repeated evaluations cost element-wise work only.

    Evaluations at a different basis (range-parameter candidates) transport
    the sampled coefficients through the linear map ``pinv(M_new) @ M_ref``,
    a change of variables in the marginalized integral: the sampled field is
    re-expressed in the candidate basis and the Jacobian log determinant
    enters as a constant.  Reinterpreting raw coordinates across bases
    instead would make the importance weights degenerate, because
    eigenvector conventions and geometry shift with the range.
    """

    chain: DeltaChain
    psi_tilde: PsiParams
    basis: ProjectionBasis
    z: np.ndarray
    X: np.ndarray
    offset: np.ndarray
    family: Family
    cached_ref: np.ndarray = field(init=False)
    V: np.ndarray = field(init=False)
    zv: np.ndarray = field(init=False)
    q: np.ndarray = field(init=False)
    logfact: float = field(init=False)
    transport_logdet: float = 0.0

    def __post_init__(self):
        S = self.chain.samples
        if S.shape[1] != self.basis.rank:
            raise InputError("chain dimension does not match basis rank")
        self.V = S @ self.basis.M.T
        self.zv = self.V @ self.z
        if self.psi_tilde.domain == "continuous":
            self.q = np.einsum("ij,ij->i", S, S)
        else:
            if self.basis.mqm is None:
                raise InputError("discrete objective requires a basis with 'mqm'")
            self.q = np.einsum("ij,ij->i", S @ self.basis.mqm, S)
        if self.basis.mqm is not None and self.basis.mqm_logdet is None:
            object.__setattr__(self.basis, "mqm_logdet", _penalty_logdet(self.basis.mqm))
        self.logfact = (
            float(np.sum(gammaln(self.z + 1.0))) if self.family.name == "poisson" else 0.0
        )
        self.cached_ref = self._sample_log_joint(self.psi_tilde, self.V, self.zv, self.q, 0.0)

    # -- internals ----------------------------------------------------------

    @property
    def K(self) -> int:
        return self.chain.samples.shape[0]

    @property
    def m(self) -> int:
        return self.basis.rank

    @property
    def domain(self) -> str:
        return self.psi_tilde.domain

    def _transport(self, basis: ProjectionBasis):
        """Re-express the sampled fields in another basis.

        Returns ``(V, zv, q, logdet)`` where the rows of ``V`` are the
        transported fields, ``q`` the per-sample prior quadratic in the new
        coordinates, and ``logdet`` the Jacobian constant of the coefficient
        map.
        """
        if basis.rank != self.m:
            raise InputError("transport requires equal basis ranks")
        T = np.linalg.pinv(basis.M, rcond=1e-12) @ self.basis.M
        sign, logdet = np.linalg.slogdet(T)
        if sign == 0 or not np.isfinite(logdet):
            raise NumericalError("coefficient transport between bases is singular")
        A = self.chain.samples @ T.T
        V = A @ basis.M.T
        q = np.einsum("ij,ij->i", A, A)
        return V, V @ self.z, q, float(logdet)

    def _numerator_view(self, basis: ProjectionBasis | None):
        if basis is None or basis is self.basis:
            return self.V, self.zv, self.q, self.transport_logdet
        V, zv, q, logdet = self._transport(basis)
        return V, zv, q, logdet + self.transport_logdet

    def _sample_log_joint(self, psi: PsiParams, V: np.ndarray, zv: np.ndarray,
                          q: np.ndarray, const: float) -> np.ndarray:
        """Per-sample log joint at ``psi``; responses enter through ``V``."""
        c = self.X @ psi.beta + self.offset
        zc = float(self.z @ c)
        K = V.shape[0]
        ll = np.empty(K)
        with np.errstate(over="ignore"):
            for a in range(0, K, _CHUNK):
                b = min(a + _CHUNK, K)
                eta = V[a:b] + c
                if self.family.name == "poisson":
                    ll[a:b] = zv[a:b] + zc - np.exp(eta).sum(axis=1) - self.logfact
                else:
                    ll[a:b] = zv[a:b] + zc - np.logaddexp(0.0, eta).sum(axis=1)
        mqm_logdet = self.basis.mqm_logdet if self.domain == "discrete" else None
        return ll + _prior_terms(psi, q, self.m, mqm_logdet) + const

    def rebased(self, basis: ProjectionBasis) -> "McObjective":
        """A view of the same samples with the numerator basis replaced.

        Coefficients are transported into the new basis; the reference
        denominator (and hence the importance-weight normalization) is kept
        from the original objective, which is what a range update requires.
        """
        V, zv, q, logdet = self._numerator_view(basis)
        new = McObjective.__new__(McObjective)
        new.chain = self.chain
        new.psi_tilde = self.psi_tilde
        new.basis = basis
        new.z, new.X, new.offset, new.family = self.z, self.X, self.offset, self.family
        new.V = V
        new.zv = zv
        new.q = q
        new.logfact = self.logfact
        new.cached_ref = self.cached_ref
        new.transport_logdet = logdet
        return new


def build_objective(chain: DeltaChain, z, X, basis: ProjectionBasis,
                    psi_tilde: PsiParams, family, offset=None) -> McObjective:
    """Assemble the Monte Carlo objective from a chain of coefficient draws."""
    family = family_from_name(family)
    z = family.check_response(z)
    n = z.shape[0]
    X = np.asarray(X, dtype=float)
    offset = np.zeros(n) if offset is None else check_vector(offset, n=n, name="offset")
    return McObjective(
        chain=chain, psi_tilde=psi_tilde, basis=basis,
        z=z, X=X, offset=offset, family=family,
    )


def _log_weights(obj: McObjective, psi: PsiParams, basis: ProjectionBasis | None = None):
    V, zv, q, const = obj._numerator_view(basis)
    return obj._sample_log_joint(psi, V, zv, q, const) - obj.cached_ref, V, q


def _normalized_weights(d: np.ndarray):
    """Stable normalized importance weights and the log-mean-exp value."""
    dmax = float(d.max())
    if not np.isfinite(dmax):
        raise NumericalError(
            f"all importance weights degenerate; max log-weight = {dmax}",
            detail={"max_log_weight": dmax},
        )
    w = np.exp(d - dmax)
    total = float(w.sum())
    lhat = dmax + np.log(total / d.shape[0])
    return w / total, lhat, dmax


def mc_loglik(obj: McObjective, psi: PsiParams, basis: ProjectionBasis | None = None) -> float:
    """Monte Carlo log likelihood ratio of ``psi`` against the importance parameter.

    Evaluated with the log-sum-exp trick; exactly ``0.0`` at the importance
    parameter itself.  Raises :class:`NumericalError` when every weight
    underflows, reporting the largest log weight.
    """
    d, _, _ = _log_weights(obj, psi, basis)
    _, lhat, _ = _normalized_weights(d)
    return float(lhat)


def _scores(obj: McObjective, psi: PsiParams, V: np.ndarray,
            q: np.ndarray | None = None) -> np.ndarray:
    """Per-sample score vectors over (beta, theta), shape (K, p + 1)."""
    if q is None:
        q = obj.q
    K = V.shape[0]
    p = obj.X.shape[1]
    c = obj.X @ psi.beta + obj.offset
    S = np.empty((K, p + 1))
    with np.errstate(over="ignore"):
        for a in range(0, K, _CHUNK):
            b = min(a + _CHUNK, K)
            eta = V[a:b] + c
            mu = obj.family.mean(eta)
            S[a:b, :p] = (obj.z - mu) @ obj.X
    if psi.domain == "continuous":
        s2 = psi.sigma2
        S[:, p] = -0.5 * obj.m / s2 + 0.5 * q / s2**2
    else:
        tau = psi.tau
        S[:, p] = 0.5 * obj.m / tau - 0.5 * q
    return S


def mc_gradient(obj: McObjective, psi: PsiParams, basis: ProjectionBasis | None = None) -> np.ndarray:
    """Gradient of the Monte Carlo objective over ``(beta, theta)``.

    A self-normalized importance-weighted average of the per-sample score
    vectors; at the importance parameter the weights are uniform and the
    gradient reduces to the plain score average.
    """
    d, V, q = _log_weights(obj, psi, basis)
    w, _, _ = _normalized_weights(d)
    return _scores(obj, psi, V, q).T @ w


def mc_hessian(obj: McObjective, psi: PsiParams, basis: ProjectionBasis | None = None) -> np.ndarray:
    """Hessian of the Monte Carlo objective over ``(beta, theta)``.

    Weighted average of per-sample Hessians plus the weighted covariance of
    the per-sample scores.  The result is symmetrized before returning.
    """
    d, V, q = _log_weights(obj, psi, basis)
    w, _, _ = _normalized_weights(d)
    H, _, _ = _hessian_pieces(obj, psi, V, w, q)
    return H


def _hessian_pieces(obj: McObjective, psi: PsiParams, V: np.ndarray, w: np.ndarray,
                    q: np.ndarray | None = None):
    if q is None:
        q = obj.q
    K = V.shape[0]
    p = obj.X.shape[1]
    c = obj.X @ psi.beta + obj.offset
    S = _scores(obj, psi, V, q)
    grad = S.T @ w
    # Weighted mean of per-sample Hessians: beta block is -X' diag(vbar) X
    # with vbar the weighted conditional variance; cross terms vanish.
    vbar = np.zeros(obj.z.shape[0])
    with np.errstate(over="ignore"):
        for a in range(0, K, _CHUNK):
            b = min(a + _CHUNK, K)
            eta = V[a:b] + c
            var = obj.family.variance(eta)
            vbar += w[a:b] @ var
    H = np.zeros((p + 1, p + 1))
    H[:p, :p] = -(obj.X.T @ (obj.X * vbar[:, None]))
    if psi.domain == "continuous":
        s2 = psi.sigma2
        H[p, p] = float(w @ (0.5 * obj.m / s2**2 - q / s2**3))
    else:
        H[p, p] = -0.5 * obj.m / psi.tau**2
    # Covariance of the scores under the weights (weights sum to one).
    Sw = S * w[:, None]
    H += S.T @ Sw - np.outer(grad, grad)
    return 0.5 * (H + H.T), grad, S


# ---------------------------------------------------------------------------
# Newton ascent
# ---------------------------------------------------------------------------


@dataclass
class NewtonResult:
    psi: PsiParams
    loglik: float
    gradient: np.ndarray
    converged: bool
    n_iter: int


def _solve_ascent_step(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``-H s = g``, ridging ``-H`` up to positive definiteness.

    The Monte Carlo objective is not globally concave (the score-covariance
    part of the Hessian can dominate), so the negated Hessian is pushed onto
    the positive-definite cone with an escalating diagonal ridge before
    solving; a large ridge degrades gracefully to a scaled gradient step.
    """
    from scipy.linalg import cho_factor, cho_solve

    A = -H
    dim = A.shape[0]
    scale = max(float(np.abs(np.diag(A)).max()), 1.0)
    ridge = 0.0
    for _ in range(40):
        try:
            c = cho_factor(A + ridge * np.eye(dim), lower=True)
            step = cho_solve(c, g)
            if np.all(np.isfinite(step)):
                return step
        except np.linalg.LinAlgError:
            pass
        ridge = 1e-8 * scale if ridge == 0.0 else ridge * 10.0
    raise OptimizationError("Newton system remained singular after ridging")


def _maximize_newton(evaluate, x0: np.ndarray, positive_idx: tuple,
                     tol: float, max_iter: int, value_only=None,
                     in_bounds=None):
    """Newton ascent with step halving on a generic objective.

    ``evaluate(x)`` returns ``(value, gradient, hessian)``; ``value_only``,
    when given, is a cheaper value-only evaluation used inside the
    backtracking line search.  Steps that would push a coordinate in
    ``positive_idx`` to zero or below (or violate ``in_bounds``) are halved,
    as are steps that decrease the objective.  Stops when the gradient
    sup-norm drops below ``tol`` or the iteration cap is reached.
    """
    if value_only is None:
        value_only = lambda v: evaluate(v)[0]
    if in_bounds is None:
        in_bounds = lambda v: True
    x = np.asarray(x0, dtype=float).copy()
    value, g, H = evaluate(x)
    n_iter = 0
    converged = float(np.max(np.abs(g))) < tol
    while not converged and n_iter < max_iter:
        n_iter += 1
        step = _solve_ascent_step(H, g)
        for _ in range(80):
            cand = x + step
            if all(cand[j] > 0 for j in positive_idx) and in_bounds(cand):
                break
            step = 0.5 * step
        else:
            break
        accepted = False
        for _ in range(40):
            cand = x + step
            cval = value_only(cand)
            if np.isfinite(cval) and cval >= value - 1e-12 * (1.0 + abs(value)):
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            break
        moved = float(np.max(np.abs(cand - x)))
        x = cand
        value, g, H = evaluate(x)
        if float(np.max(np.abs(g))) < tol:
            converged = True
        elif moved < 1e-13 * (1.0 + float(np.max(np.abs(x)))):
            break  # pinned against a bound; no further progress possible
    return x, value, g, converged, n_iter


def newton_raphson(obj: McObjective, psi_start: PsiParams, which: str | None = None,
                   basis: ProjectionBasis | None = None, *,
                   tol: float = 1e-6, max_iter: int = 100,
                   min_weight_ess: float | None = None,
                   theta_ratio_cap: float = 3.0) -> NewtonResult:
    """Maximize the Monte Carlo objective over the regression coefficients and
    the variance-type parameter, holding any range parameter fixed.

    Step halving keeps the variance-type parameter strictly positive and the
    objective nondecreasing across accepted steps.

    The sampled objective is only trustworthy where the importance weights
    retain information: candidates whose weight effective size
    ``1 / sum(w^2)`` falls below ``min_weight_ess`` (default ``max(16,
    K/20)``) are rejected like downhill steps.  Without this trust region a
    Newton step can "converge" on the surface spanned by a single dominating
    sample, far from the maximizer.  The variance-type parameter is further
    damped to a factor of ``theta_ratio_cap`` per call: shrinking it keeps
    weights alive far past where the estimate is meaningful, while growing
    it back degenerates them, so an uncapped call ratchets the variance
    downward.  The outer importance search recovers any remaining distance
    on fresh samples.
    """
    expected = "beta_sigma2" if psi_start.domain == "continuous" else "beta_tau"
    if which is not None and which != expected:
        raise InputError(f"which={which!r} conflicts with the {psi_start.domain} domain")
    p = psi_start.beta.shape[0]
    if basis is not None and basis is not obj.basis:
        obj = obj.rebased(basis)
    if min_weight_ess is None:
        min_weight_ess = max(16.0, obj.K / 20.0)
    min_weight_ess = min(min_weight_ess, obj.K)

    def weights_at(psi):
        d, V, q = _log_weights(obj, psi)
        w, lhat, _ = _normalized_weights(d)
        return w, lhat, V, q

    def evaluate(vec):
        psi = psi_start.with_vector(vec)
        try:
            w, lhat, V, q = weights_at(psi)
        except NumericalError:
            return -np.inf, np.zeros(p + 1), -np.eye(p + 1)
        if 1.0 / float(w @ w) < min_weight_ess:
            return -np.inf, np.zeros(p + 1), -np.eye(p + 1)
        H, grad, _ = _hessian_pieces(obj, psi, V, w, q)
        return lhat, grad, H

    def value_only(vec):
        try:
            w, lhat, _, _ = weights_at(psi_start.with_vector(vec))
        except NumericalError:
            return -np.inf
        if 1.0 / float(w @ w) < min_weight_ess:
            return -np.inf
        return lhat

    theta0 = psi_start.theta
    lo, hi = theta0 / theta_ratio_cap, theta0 * theta_ratio_cap

    x, value, g, converged, n_iter = _maximize_newton(
        evaluate, psi_start.as_vector(), positive_idx=(p,), tol=tol,
        max_iter=max_iter, value_only=value_only,
        in_bounds=lambda vec: lo <= vec[p] <= hi,
    )
    return NewtonResult(
        psi=psi_start.with_vector(x), loglik=float(value), gradient=g,
        converged=converged, n_iter=n_iter,
    )


# ---------------------------------------------------------------------------
# Range-parameter profiling
# ---------------------------------------------------------------------------


@dataclass
class ProfileResult:
    phi: float
    basis: ProjectionBasis
    loglik: float
    evaluations: list
    psi: PsiParams | None = None


def _golden_section_max(f, lo: float, hi: float, tol: float):
    """Golden-section search for the maximum of a unimodal function."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    evals = [(c, fc), (d, fd)]
    while (b - a) > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
            evals.append((c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
            evals.append((d, fd))
    return evals


def profile_phi(obj: McObjective, coords, psi_current: PsiParams,
                mode: str = "grid_neighbors", *, builder: BasisBuilder,
                X_for_restriction=None, grid=(0.8, 0.9, 1.0, 1.1, 1.25),
                bounds_factor: float = 4.0, tol_rel: float = 1e-3,
                basis_cache: dict | None = None,
                newton_tol: float = 1e-6, newton_max_iter: int = 40,
                phi_max: float | None = None) -> ProfileResult:
    """Update the range parameter by maximizing the profiled objective.

    Each candidate range rebuilds the projection basis, transports the
    sampled coefficients into it, and re-optimizes the regression and
    variance parameters there, so the comparison follows the ridge that
    couples the variance and range parameters.  ``grid_neighbors`` scans
    multiplicative neighbors of the current range (ties break to the smaller
    candidate); ``bounded_maximize`` runs a golden-section search over
    ``[phi / f, phi * f]``.  Candidates above ``phi_max`` are not evaluated:
    ranges beyond the extent of the data are unidentifiable, and on weakly
    informative instances the likelihood can otherwise creep along the
    boundary ridge indefinitely.  Candidates whose basis construction or
    transport fails are skipped with a warning.
    """
    if psi_current.domain != "continuous":
        raise InputError("range profiling applies to continuous-domain models only")
    coords = check_coordinates(coords)
    phi0 = psi_current.phi
    if phi_max is not None and phi0 > phi_max:
        phi0 = phi_max
    cache = basis_cache if basis_cache is not None else {}
    psi_at: dict = {}

    def get_basis(phi: float) -> ProjectionBasis:
        key = float(phi)
        if key not in cache:
            cache[key] = builder.build(coords, phi, X_for_restriction)
        return cache[key]

    def evaluate(phi: float) -> float:
        if phi_max is not None and phi > phi_max:
            return -np.inf
        try:
            basis = get_basis(phi)
            start = PsiParams(beta=psi_current.beta, sigma2=psi_current.sigma2, phi=phi)
            res = newton_raphson(obj, start, basis=basis, tol=newton_tol,
                                 max_iter=newton_max_iter)
            psi_at[float(phi)] = res.psi
            return res.loglik
        except (NumericalError, OptimizationError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"range candidate {phi:.6g} skipped: {exc}", stacklevel=2)
            return -np.inf

    if mode == "grid_neighbors":
        cands = sorted(phi0 * np.asarray(grid, dtype=float))
        evals = [(phi, evaluate(phi)) for phi in cands]
    elif mode == "bounded_maximize":
        lo, hi = phi0 / bounds_factor, phi0 * bounds_factor
        if phi_max is not None:
            hi = min(hi, phi_max)
        evals = _golden_section_max(evaluate, lo, hi, tol_rel * phi0)
        evals.append((phi0, evaluate(phi0)))  # never move to a worse point
    else:
        raise InputError(f"unknown profile mode {mode!r}")

    finite = [(phi, val) for phi, val in evals if np.isfinite(val)]
    if not finite:
        raise OptimizationError("every range candidate failed to evaluate")
    finite.sort(key=lambda e: e[0])
    # Ascending candidate order plus strict comparison breaks ties downward.
    best_phi, best_val = finite[0]
    for phi, val in finite[1:]:
        if val > best_val:
            best_phi, best_val = phi, val
    return ProfileResult(
        phi=float(best_phi), basis=get_basis(best_phi),
        loglik=float(best_val), evaluations=evals,
        psi=psi_at.get(float(best_phi)),
    )


# ---------------------------------------------------------------------------
# Fit driver
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    t: int
    psi: dict
    lhat_next: float
    ase: float
    K: int
    acceptance_rate: float
    ess: float
    thin: int
    proposal_sd: float
    wall_time: float


@dataclass
class FitTrace:
    """Append-only per-outer-iteration record of the importance search."""

    rows: list = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def to_records(self) -> list:
        return [vars(r).copy() for r in self.rows]

    def to_csv(self, path) -> None:
        cols = ["t", "lhat_next", "ase", "K", "acceptance_rate", "ess",
                "thin", "proposal_sd", "wall_time"]
        with open(path, "w", encoding="utf-8") as fh:
            psi_keys = sorted(self.rows[0].psi) if self.rows else []
            fh.write(",".join(cols + [f"psi_{k}" for k in psi_keys]) + "\n")
            for r in self.rows:
                vals = [getattr(r, c) for c in cols]
                flat = []
                for k in psi_keys:
                    v = r.psi[k]
                    flat.append("|".join(f"{x:.10g}" for x in v) if isinstance(v, list) else f"{v:.10g}")
                fh.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in vals))
                fh.write("," + ",".join(flat) + "\n" if flat else "\n")


@dataclass
class McmlFit:
    """Result of a Monte Carlo maximum likelihood fit."""

    psi_hat: PsiParams
    hessian_at_hat: np.ndarray | None
    fisher_cov: np.ndarray | None
    mc_error_cov: np.ndarray | None
    final_chain: DeltaChain | None
    trace: FitTrace
    converged: bool
    family: str = "poisson"
    domain: str = "continuous"
    basis: ProjectionBasis | None = None
    psi_tilde: PsiParams | None = None
    config: McmlConfig | None = None
    coords: np.ndarray | None = None
    graph: AdjacencyGraph | None = None
    X: np.ndarray | None = None
    z: np.ndarray | None = None
    offset: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.basis.rank if self.basis is not None else 0

    def parameter_names(self) -> list:
        names = [f"beta{i + 1}" for i in range(self.psi_hat.beta.shape[0])]
        names.append("sigma2" if self.domain == "continuous" else "tau")
        return names


def _auto_proposal_sd(family: Family, basis: ProjectionBasis, psi: PsiParams,
                      X: np.ndarray, offset: np.ndarray) -> float:
    """Isotropic random-walk scale from the curvature of the target at zero.

    Approximates the total posterior precision of the coefficients by the
    likelihood curvature at the prior mode plus the prior precision, and
    applies the 2.38 random-walk scaling rule to its trace.  Computed once
    per chain; the chain itself never adapts.
    """
    eta0 = X @ psi.beta + offset
    v0 = family.variance(eta0)
    row_m2 = np.einsum("ij,ij->i", basis.M, basis.M)
    like_trace = float(v0 @ row_m2)
    if psi.domain == "continuous":
        prior_trace = basis.rank / psi.sigma2
    else:
        prior_trace = float(psi.tau * np.trace(basis.mqm))
    total = max(like_trace + prior_trace, 1e-12)
    return float(np.clip(2.38 / np.sqrt(total), 1e-4, 2.0))


def _chain_for(cfg: McmlConfig, *, family: Family, basis: ProjectionBasis,
               psi: PsiParams, z, X, offset, ess_target: float,
               chain_index: int) -> DeltaChain:
    """Run one coefficient chain with the fit-level automatic settings.

    With ``thin="auto"`` the chain starts unthinned under a store cap of
    ``stored_mult`` times the ESS target; the cap's stride doubling then
    adapts the retained spacing to however slowly the chain mixes.
    """
    target = make_sglmm_target(z, X, basis, psi, family, offset)
    if cfg.proposal_sd == "auto":
        sd = _auto_proposal_sd(family, basis, psi, X, offset)
    else:
        sd = float(cfg.proposal_sd)
    ess_target = max(float(ess_target), 32.0)
    if cfg.thin == "auto":
        thin = 1
        max_stored = int(max(cfg.stored_mult * ess_target, 512))
    else:
        thin = int(cfg.thin)
        max_stored = None
    seed = substream_seed(cfg.seed, "chain", chain_index).generate_state(1)[0]
    chain_cfg = ChainConfig(
        proposal_sd=sd, seed=int(seed), burn_in=cfg.burn_in,
        max_iterations=cfg.max_chain_iterations, ess_target=ess_target,
        thin=thin, max_stored=max_stored,
    )
    return run_chain(chain_cfg, target, basis.rank)


def _weight_chain_ase(d: np.ndarray) -> float:
    """Monte Carlo standard error of the log-mean-exp of a log-weight chain."""
    dmax = float(d.max())
    if not np.isfinite(dmax):
        return np.inf
    w = np.exp(d - dmax)
    mean_w = float(w.mean())
    if mean_w <= 0:
        return np.inf
    if w.shape[0] >= 100:
        ase_w = batch_means_ase(w)
    else:
        ase_w = float(np.std(w, ddof=1) / np.sqrt(w.shape[0]))
    return ase_w / mean_w


def _initial_psi(z, X, offset, family: Family, domain: str,
                 coords=None) -> PsiParams:
    """GLM-based starting values for the search phase."""
    init = irls_initial_estimates(z, X, offset=offset, family=family)
    spread = float(np.clip(init.working_residual_var, 0.05, 20.0))
    if domain == "continuous":
        return PsiParams(beta=init.beta, sigma2=spread, phi=initial_phi(coords))
    return PsiParams(beta=init.beta, tau=float(np.clip(1.0 / spread, 0.05, 100.0)))


def _invert_negative_hessian(H: np.ndarray):
    """Inverse of ``-H`` when positive definite, else ``None`` with the offending eigenvalue."""
    A = -0.5 * (H + H.T)
    vals = np.linalg.eigvalsh(A)
    if vals.min() <= 0:
        return None, float(vals.min())
    return np.linalg.inv(A), float(vals.min())


def _mc_error_sandwich(obj: McObjective, psi: PsiParams, hessian: np.ndarray,
                       basis: ProjectionBasis | None = None) -> np.ndarray | None:
    """Monte Carlo error covariance ``Ainv B Ainv / K`` of the maximizer.

    ``B`` is the weighted second moment of the per-sample scores with squared
    importance weights over the squared mean weight, evaluated in log space
    so the unnormalized scale cancels.
    """
    if basis is not None and basis is not obj.basis:
        obj = obj.rebased(basis)
    d, V, q = _log_weights(obj, psi)
    dmax = float(d.max())
    if not np.isfinite(dmax):
        return None
    w = np.exp(d - dmax)
    S = _scores(obj, psi, V, q)
    K = S.shape[0]
    B = (S * (w**2)[:, None]).T @ S / K
    B /= (w.mean()) ** 2
    Ainv, _ = _invert_negative_hessian(hessian)
    if Ainv is None:
        scale = max(float(np.abs(hessian).max()), 1.0)
        Ainv = np.linalg.inv(-(hessian - 1e-8 * scale * np.eye(hessian.shape[0])))
        warnings.warn("indefinite Hessian ridged for the Monte Carlo error sandwich",
                      stacklevel=2)
    cov = Ainv @ B @ Ainv / K
    return 0.5 * (cov + cov.T)


def fit_continuous(z, X, coords, cfg: McmlConfig | None = None, offset=None) -> McmlFit:
    """Fit a continuous-domain spatial GLMM by projected Monte Carlo ML.

    Runs the iterative importance search (short chains, coefficient Newton
    updates, multiplicative neighbor search on the range) until the objective
    improvement is statistically indistinguishable from zero, then the final
    long-chain maximization with a bounded golden-section range search.

    Returns a fit whose ``converged`` flag reports whether the search
    stopping rule was met before the outer-iteration cap.
    """
    cfg = cfg or McmlConfig()
    family = family_from_name(cfg.family)
    z = family.check_response(z)
    n = z.shape[0]
    coords = check_coordinates(coords)
    X = check_design(X, n=n)
    offset = np.zeros(n) if offset is None else check_vector(offset, n=n, name="offset")
    m = min(cfg.m, n)
    builder = BasisBuilder(
        m=m, nu=cfg.nu, restricted=cfg.restricted,
        exact_threshold=cfg.exact_eig_threshold, force_exact=cfg.force_exact_eig,
        oversample=cfg.nystrom_oversample,
        sketch_seed=int(substream_seed(cfg.seed, "sketch").generate_state(1)[0]),
    )
    basis_cache: dict = {}

    def get_basis(phi: float) -> ProjectionBasis:
        key = float(phi)
        if key not in basis_cache:
            basis_cache[key] = builder.build(coords, phi, X)
        return basis_cache[key]

    psi = _initial_psi(z, X, offset, family, "continuous", coords=coords)
    return _run_mcml(
        z=z, X=X, offset=offset, family=family, cfg=cfg, psi0=psi,
        get_basis=get_basis, coords=coords, builder=builder,
        basis_cache=basis_cache, graph=None, domain="continuous",
    )


def fit_discrete(z, X, graph: AdjacencyGraph, cfg: McmlConfig | None = None,
                 offset=None) -> McmlFit:
    """Fit a discrete-domain (lattice) spatial GLMM by projected Monte Carlo ML.

    The basis of leading eigenvectors of the covariate-orthogonalized
    adjacency operator is built once; there is no range parameter, so the
    Newton update is joint over the coefficients and the precision scale.
    """
    cfg = cfg or McmlConfig()
    family = family_from_name(cfg.family)
    z = family.check_response(z)
    n = z.shape[0]
    if graph.n != n:
        raise InputError(f"graph has {graph.n} nodes but there are {n} responses")
    X = check_design(X, n=n)
    offset = np.zeros(n) if offset is None else check_vector(offset, n=n, name="offset")
    m = min(cfg.m, n - X.shape[1])
    basis = moran_basis(graph, X, m)

    psi = _initial_psi(z, X, offset, family, "discrete")
    return _run_mcml(
        z=z, X=X, offset=offset, family=family, cfg=cfg, psi0=psi,
        get_basis=lambda phi: basis, coords=None, builder=None,
        basis_cache=None, graph=graph, domain="discrete",
    )


def standard_mcml_reference(z, X, coords_or_graph, cfg: McmlConfig | None = None,
                            offset=None) -> McmlFit:
    """Full-rank reference fit for small problems (n <= 200).

    The random effect is kept at full dimension: on continuous domains the
    basis is the Cholesky factor of the correlation matrix (coefficients then
    carry the isotropic prior), on discrete domains the identity with a
    jittered graph precision penalty.  Cost grows quadratically per chain
    iteration, hence the size cap.  Used as a cross-check oracle for the
    projected fits.
    """
    cfg = cfg or McmlConfig()
    family = family_from_name(cfg.family)
    z = family.check_response(z)
    n = z.shape[0]
    if n > 200:
        raise InputError(f"reference mode is limited to n <= 200, got {n}")
    X = check_design(X, n=n)
    offset = np.zeros(n) if offset is None else check_vector(offset, n=n, name="offset")

    if isinstance(coords_or_graph, AdjacencyGraph):
        graph = coords_or_graph
        Q = build_precision(graph)
        G = Q + 1e-6 * np.eye(n)
        basis = ProjectionBasis(
            M=np.eye(n), mqm=G, mqm_logdet=_penalty_logdet(G),
            method="identity_reference", restricted=False,
        )
        psi = _initial_psi(z, X, offset, family, "discrete")
        return _run_mcml(
            z=z, X=X, offset=offset, family=family, cfg=cfg, psi0=psi,
            get_basis=lambda phi: basis, coords=None, builder=None,
            basis_cache=None, graph=graph, domain="discrete", reference=True,
        )

    coords = check_coordinates(coords_or_graph)
    basis_cache: dict = {}

    def get_basis(phi: float) -> ProjectionBasis:
        key = float(phi)
        if key not in basis_cache:
            R = correlation_matrix(coords, phi, cfg.nu)
            L = np.linalg.cholesky(R + JITTER * np.eye(n))
            basis_cache[key] = ProjectionBasis(
                M=L, phi_at_build=phi, method="chol_reference"
            )
        return basis_cache[key]

    psi = _initial_psi(z, X, offset, family, "continuous", coords=coords)
    return _run_mcml(
        z=z, X=X, offset=offset, family=family, cfg=cfg, psi0=psi,
        get_basis=get_basis, coords=coords, builder=None,
        basis_cache=basis_cache, graph=None, domain="continuous", reference=True,
    )


def _run_mcml(*, z, X, offset, family: Family, cfg: McmlConfig, psi0: PsiParams,
              get_basis, coords, builder, basis_cache, graph, domain: str,
              reference: bool = False) -> McmlFit:
    """Shared two-phase driver for all fit entry points."""
    trace = FitTrace()
    diagnostics: dict = {"phases": {}, "reference_mode": reference}
    t_start = time.perf_counter()
    m = get_basis(psi0.phi if domain == "continuous" else 0.0).rank
    ess_search = max(cfg.ess_search_mult * m, 32.0)
    ess_final = max(cfg.ess_final_mult * m, 64.0)

    if domain == "continuous":
        if cfg.phi_max == "auto":
            # Ranges beyond the data extent are unidentifiable.
            phi_max = 2.0 * float(np.hypot(np.ptp(coords[:, 0]), np.ptp(coords[:, 1])))
        else:
            phi_max = float(cfg.phi_max)
        diagnostics["phi_max"] = phi_max
    else:
        phi_max = None

    def run_profile(obj, psi_cur, mode):
        if reference:
            # Wrap the reference basis construction in a builder-like shim.
            class _Shim:
                @staticmethod
                def build(coords_, phi_, X_=None):
                    return get_basis(phi_)

            shim = _Shim()
            return profile_phi(
                obj, coords, psi_cur, mode, builder=shim,
                grid=cfg.phi_grid, bounds_factor=cfg.phi_bounds_factor,
                tol_rel=cfg.phi_tol_rel, basis_cache=basis_cache, phi_max=phi_max,
            )
        return profile_phi(
            obj, coords, psi_cur, mode, builder=builder, X_for_restriction=X,
            grid=cfg.phi_grid, bounds_factor=cfg.phi_bounds_factor,
            tol_rel=cfg.phi_tol_rel, basis_cache=basis_cache, phi_max=phi_max,
        )

    # ---------------- Phase 1: iterative importance search ----------------
    psi = psi0
    search_converged = False
    chain_index = 0
    for t in range(cfg.outer_cap):
        t0 = time.perf_counter()
        basis = get_basis(psi.phi if domain == "continuous" else 0.0)
        chain = _chain_for(
            cfg, family=family, basis=basis, psi=psi, z=z, X=X, offset=offset,
            ess_target=ess_search, chain_index=chain_index,
        )
        chain_index += 1
        obj = build_objective(chain, z, X, basis, psi, family, offset)
        step = newton_raphson(obj, psi, tol=cfg.newton_tol, max_iter=cfg.newton_max_iter)
        psi_next = step.psi
        lhat_next = step.loglik
        if domain == "continuous":
            prof = run_profile(obj, psi_next, "grid_neighbors")
            if prof.phi != psi_next.phi and prof.psi is not None:
                psi_next = prof.psi
                lhat_next = prof.loglik
        d, _, _ = _log_weights(
            obj, psi_next,
            None if domain == "discrete" or psi_next.phi == psi.phi
            else get_basis(psi_next.phi),
        )
        ase = _weight_chain_ase(d)
        trace.append(TraceRow(
            t=t, psi={k: v for k, v in psi.to_dict().items()},
            lhat_next=float(lhat_next), ase=float(ase), K=chain.K,
            acceptance_rate=chain.acceptance_rate, ess=chain.ess_first_coord,
            thin=chain.thin, proposal_sd=chain.proposal_sd,
            wall_time=time.perf_counter() - t0,
        ))
        psi = psi_next
        if lhat_next + Z_05 * ase < cfg.epsilon:
            search_converged = True
            break
    diagnostics["phases"]["search"] = time.perf_counter() - t_start
    diagnostics["outer_iterations"] = len(trace.rows)
    diagnostics["search_converged"] = search_converged
    if not search_converged:
        warnings.warn("importance search hit the outer-iteration cap", stacklevel=2)

    # ---------------- Phase 2: final approximation at psi_tilde ----------------
    t1 = time.perf_counter()
    psi_tilde = psi
    basis = get_basis(psi_tilde.phi if domain == "continuous" else 0.0)
    final_chain = _chain_for(
        cfg, family=family, basis=basis, psi=psi_tilde, z=z, X=X, offset=offset,
        ess_target=ess_final, chain_index=chain_index,
    )
    obj = build_objective(final_chain, z, X, basis, psi_tilde, family, offset)
    step = newton_raphson(obj, psi_tilde, tol=cfg.newton_tol, max_iter=cfg.newton_max_iter)
    psi_hat = step.psi
    lhat_hat = step.loglik
    final_basis = basis
    if domain == "continuous":
        prof = run_profile(obj, psi_hat, "bounded_maximize")
        if prof.phi != psi_hat.phi and prof.loglik >= lhat_hat and prof.psi is not None:
            final_basis = prof.basis
            obj_hat = obj.rebased(final_basis)
            step2 = newton_raphson(obj_hat, prof.psi, tol=cfg.newton_tol,
                                   max_iter=cfg.newton_max_iter)
            psi_hat = step2.psi
            lhat_hat = step2.loglik
            obj = obj_hat
    H = mc_hessian(obj, psi_hat)
    fisher_cov, min_eig = _invert_negative_hessian(H)
    mc_cov = _mc_error_sandwich(obj, psi_hat, H)
    diagnostics["phases"]["final"] = time.perf_counter() - t1
    diagnostics["final_ess"] = final_chain.ess_first_coord
    diagnostics["final_acceptance"] = final_chain.acceptance_rate
    diagnostics["final_thin"] = final_chain.thin
    diagnostics["final_proposal_sd"] = final_chain.proposal_sd
    diagnostics["final_K"] = final_chain.K
    diagnostics["loglik_ratio_at_hat"] = float(lhat_hat)
    diagnostics["neg_hessian_min_eigenvalue"] = min_eig
    dvals = _log_weights(obj, psi_hat)[0]
    diagnostics["max_log_weight"] = float(dvals.max())
    diagnostics["final_newton_converged"] = bool(step.converged)
    diagnostics["wall_time_total"] = time.perf_counter() - t_start
    # Converged means the importance search met its stopping rule before the
    # outer cap and the final chain reached its ESS target; the final Newton
    # may stop at the importance trust boundary without failing the fit.
    converged = bool(search_converged and final_chain.converged)

    return McmlFit(
        psi_hat=psi_hat, hessian_at_hat=H, fisher_cov=fisher_cov,
        mc_error_cov=mc_cov, final_chain=final_chain, trace=trace,
        converged=converged, family=family.name, domain=domain,
        basis=final_basis, psi_tilde=psi_tilde, config=cfg,
        coords=coords, graph=graph, X=X, z=z, offset=offset,
        diagnostics=diagnostics,
    )
