"""Random-walk Metropolis sampling of the reduced random effects, plus chain
diagnostics.

The target is the conditional density of the basis coefficients given the
data at a fixed parameter value.  Proposals are isotropic Gaussian steps; the
chain starts at the prior mode (the zero vector) and runs until the effective
sample size of the first coordinate reaches a target.

Long chains may be thinned: ``ChainConfig.thin`` stores every k-th draw, and
``max_stored`` doubles the stride on the fly once the store fills, keeping a
uniformly-spaced subsample.  Because thinning at the autocorrelation scale
preserves the information content of the chain, the effective sample size of
the stored draws tracks that of the raw chain; all stopping rules and
downstream Monte Carlo error estimates operate on the stored draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateChainError, InputError
from .glm import family_from_name
from .projection import ProjectionBasis
from .validation import check_positive_scalar, check_vector


@dataclass(frozen=True)
class ChainConfig:
    """Metropolis-Hastings run settings.

    ``max_iterations`` caps the raw post-burn-in iteration count; if the ESS
    target is not reached by then the chain is returned flagged as not
    converged.
    """

    proposal_sd: float = 0.1
    seed: int = 0
    burn_in: int = 1000
    max_iterations: int = 2_000_000
    ess_target: float = 1000.0
    thin: int = 1
    check_every: int = 500
    max_stored: int | None = None

    def __post_init__(self):
        check_positive_scalar(self.proposal_sd, "proposal_sd")
        if self.burn_in < 0 or self.max_iterations < 1:
            raise InputError("burn_in must be >= 0 and max_iterations >= 1")
        if self.thin < 1 or self.check_every < 1:
            raise InputError("thin and check_every must be >= 1")
        if self.ess_target <= 0:
            raise InputError("ess_target must be positive")
        if self.max_stored is not None:
            if self.max_stored < 16:
                raise InputError("max_stored must be at least 16")
            if self.max_stored % 2:
                object.__setattr__(self, "max_stored", self.max_stored + 1)


@dataclass
class DeltaChain:
    """Retained draws of the reduced random effects with run diagnostics."""

    samples: np.ndarray
    acceptance_rate: float
    ess_first_coord: float
    converged: bool
    thin: int
    n_raw: int
    burn_in: int
    seed: int
    proposal_sd: float

    @property
    def K(self) -> int:
        return self.samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def make_sglmm_target(z, X, basis: ProjectionBasis, psi_tilde, family, offset=None):
    """Log conditional density of the coefficients given the data, up to a
    constant, as a fast callable.

    The fixed part of the linear predictor ``X beta + offset`` is
    precomputed; each evaluation costs one basis matrix-vector product plus
    the response log density.
    """
    family = family_from_name(family)
    z = family.check_response(z)
    n = z.shape[0]
    M = basis.M
    if M.shape[0] != n:
        raise InputError("basis row count does not match the data")
    fixed = X @ psi_tilde.beta
    if offset is not None:
        fixed = fixed + check_vector(offset, n=n, name="offset")
    m = basis.rank

    if psi_tilde.domain == "continuous":
        sigma2 = psi_tilde.sigma2
        prior_const = -0.5 * m * np.log(sigma2)
        inv2s = 0.5 / sigma2

        def target(delta: np.ndarray) -> float:
            eta = fixed + M @ delta
            return family.loglik(z, eta) + prior_const - inv2s * (delta @ delta)

    else:
        if basis.mqm is None:
            raise InputError("discrete-domain target requires a basis with 'mqm'")
        G = basis.mqm
        tau = psi_tilde.tau
        prior_const = 0.5 * m * np.log(tau)

        def target(delta: np.ndarray) -> float:
            eta = fixed + M @ delta
            return family.loglik(z, eta) + prior_const - 0.5 * tau * (delta @ G @ delta)

    target.dim = m
    return target


def log_target(delta, z, X, basis: ProjectionBasis, psi_tilde, family, domain=None) -> float:
    """Log of the sampling target at a single coefficient vector.

    Equals the response log likelihood plus the coefficient prior log density
    up to an additive constant that does not depend on the coefficients or on
    the variance-type parameter's normalizing terms beyond ``log theta``.
    """
    delta = check_vector(delta, name="delta")
    if delta.shape[0] != basis.rank:
        raise InputError(
            f"delta has length {delta.shape[0]}, basis rank is {basis.rank}"
        )
    if domain is not None and domain != psi_tilde.domain:
        raise InputError(f"domain {domain!r} conflicts with psi ({psi_tilde.domain})")
    return float(make_sglmm_target(z, X, basis, psi_tilde, family)(delta))


def run_chain(cfg: ChainConfig, target, dim: int | None = None, *, dump_path=None) -> DeltaChain:
    """Run a random-walk Metropolis chain until the ESS target or the cap.

    Parameters
    ----------
    cfg : ChainConfig
        Proposal scale, seed, burn-in, thinning, and stopping settings.
    target : callable
        Log target density up to a constant; must be evaluable (finite) at
        the zero vector, which is the fixed starting state.
    dim : int, optional
        Dimension of the state; taken from ``target.dim`` when omitted.
    dump_path : path-like, optional
        Debug dump of the stored draws: CSV rows of raw iteration index,
        coordinates, and log target value.

    Returns
    -------
    DeltaChain
    """
    if dim is None:
        dim = getattr(target, "dim", None)
        if dim is None:
            raise InputError("pass dim explicitly when the target carries no 'dim'")
    dim = int(dim)

    delta = np.zeros(dim)
    logp = float(target(delta))
    if not np.isfinite(logp):
        raise InputError("target must be finite at the zero starting state")

    rng = np.random.default_rng(cfg.seed)
    sd = cfg.proposal_sd
    thin = cfg.thin
    max_stored = cfg.max_stored

    stored = []
    stored_logp = []
    accepted = 0
    total = 0
    ess = 0.0
    converged = False
    raw_since_store = thin - 1  # store the first post-burn-in draw
    next_check = cfg.check_every
    block = 4096

    # Burn-in: advance the chain without recording.
    remaining = cfg.burn_in
    while remaining > 0:
        nb = min(block, remaining)
        noise = rng.standard_normal((nb, dim))
        logu = np.log(rng.random(nb))
        for t in range(nb):
            prop = delta + sd * noise[t]
            lp = float(target(prop))
            if logu[t] < lp - logp:
                delta, logp = prop, lp
                accepted += 1
        total += nb
        remaining -= nb

    raw = 0
    while raw < cfg.max_iterations:
        nb = min(block, cfg.max_iterations - raw)
        noise = rng.standard_normal((nb, dim))
        logu = np.log(rng.random(nb))
        done = 0
        for t in range(nb):
            prop = delta + sd * noise[t]
            lp = float(target(prop))
            if logu[t] < lp - logp:
                delta, logp = prop, lp
                accepted += 1
            done = t + 1
            raw_since_store += 1
            if raw_since_store == thin:
                raw_since_store = 0
                stored.append(delta.copy())
                stored_logp.append(logp)
                n_stored = len(stored)
                check_now = n_stored >= next_check
                if max_stored is not None and n_stored >= max_stored:
                    # Keep odd indices so the retained stride stays uniform
                    # and the newest draw survives; always re-check the ESS
                    # here, because the store can refill before next_check.
                    stored = stored[1::2]
                    stored_logp = stored_logp[1::2]
                    thin *= 2
                    next_check = len(stored) + cfg.check_every
                    check_now = True
                if check_now:
                    if n_stored >= next_check:
                        next_check = n_stored + cfg.check_every
                    try:
                        ess = effective_sample_size(np.asarray([s[0] for s in stored]))
                    except (DegenerateChainError, InputError):
                        ess = 0.0
                    if ess >= cfg.ess_target:
                        converged = True
                        break
        total += done
        raw += done
        if converged:
            break

    samples = np.asarray(stored)
    if samples.size == 0:
        raise InputError("chain produced no retained samples; increase max_iterations")
    try:
        ess = effective_sample_size(samples[:, 0])
    except DegenerateChainError:
        ess = 0.0
    converged = ess >= cfg.ess_target

    if dump_path is not None:
        hdr = "raw_iter," + ",".join(f"d{j}" for j in range(dim)) + ",log_target"
        idx = (1 + np.arange(samples.shape[0])) * thin
        body = np.column_stack([idx, samples, np.asarray(stored_logp)])
        np.savetxt(dump_path, body, delimiter=",", header=hdr, comments="")

    return DeltaChain(
        samples=samples,
        acceptance_rate=accepted / max(total, 1),
        ess_first_coord=float(ess),
        converged=converged,
        thin=thin,
        n_raw=raw,
        burn_in=cfg.burn_in,
        seed=cfg.seed,
        proposal_sd=cfg.proposal_sd,
    )


def _autocovariances(x: np.ndarray) -> np.ndarray:
    """Biased sample autocovariances at all lags via FFT."""
    n = x.shape[0]
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    return acov


def effective_sample_size(x) -> float:
    """Effective sample size of a scalar chain.

    Computes ``K / (1 + 2 sum rho_i)`` with the autocorrelation sum
    truncated by the initial-positive-sequence rule: consecutive lag pairs
    are accumulated until a pair sum turns nonpositive.  The result is
    clamped to ``(0, K]``.

    Raises
    ------
    InputError
        If the chain is shorter than 10.
    DegenerateChainError
        If the chain is constant.
    """
    x = np.asarray(x, dtype=float).ravel()
    K = x.shape[0]
    if K < 10:
        raise InputError("need a chain of length >= 10 for an ESS estimate")
    acov = _autocovariances(x)
    if acov[0] <= 0:
        raise DegenerateChainError("constant chain has no effective sample size")
    rho = acov / acov[0]
    # Geyer-style pairing: Gamma_k = rho_{2k} + rho_{2k+1}, starting at lag 0.
    ssum = -1.0  # corrects for the lag-0 term counted in the first pair
    t = 0
    while t + 1 < K:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        ssum += 2.0 * pair
        t += 2
    denom = max(ssum, 1.0 / K)
    return float(min(K, K / denom))


def batch_means_ase(x) -> float:
    """Asymptotic standard error of the chain mean via nonoverlapping batch means.

    Uses ``floor(sqrt(K))`` batches of ``floor(K / floor(sqrt(K)))``
    consecutive draws; trailing draws beyond the last full batch are ignored.
    """
    x = np.asarray(x, dtype=float).ravel()
    K = x.shape[0]
    if K < 100:
        raise InputError("need a chain of length >= 100 for a batch-means ASE")
    a = int(np.floor(np.sqrt(K)))
    b = K // a
    means = x[: a * b].reshape(a, b).mean(axis=1)
    if np.ptp(means) == 0:
        return 0.0
    return float(np.std(means, ddof=1) / np.sqrt(a))


def gelman_rubin_from_ess(ess: float, chains: int) -> float:
    """Potential scale reduction factor implied by an ESS and a chain count.

    ``sqrt(1 + chains / ess)``; approaches 1 from above as the ESS grows and
    equals exactly 1 in the zero-chain limit.
    """
    if chains < 0:
        raise InputError("chain count must be nonnegative")
    if chains == 0:
        return 1.0
    if ess <= 0:
        raise InputError("ess must be positive")
    return float(np.sqrt(1.0 + chains / ess))
