"""Reduced-rank spatial bases.

The random effect ``W`` (dimension n) is replaced by ``M @ delta`` where
``M`` is an n-by-m basis and ``delta`` is an m-dimensional coefficient
vector.  Three constructions are provided:

* exact leading eigenpairs of a correlation matrix (continuous domain),
* a randomized, oversampled low-rank eigendecomposition of the same matrix
  for large n (continuous domain),
* leading eigenvectors of the covariate-orthogonalized adjacency operator
  (discrete domain).

For the continuous constructions ``M = U sqrt(D)`` where ``U`` holds
orthonormal eigenvectors and ``D`` the corresponding eigenvalues; the
coefficients then carry an isotropic Gaussian prior.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import eigh

from .exceptions import InputError, RankDeficiencyError
from .kernels import (
    AdjacencyGraph,
    build_precision,
    correlation_matrix,
    moran_operator,
    projection_complement,
)
from .validation import check_design

#: Relative eigenvalue cutoff: directions with eigenvalue below
#: ``DROP_TOL * max eigenvalue`` are treated as numerically null wherever a
#: (pseudo-)inverse of the spectrum is required.
DROP_TOL = 1e-12


@dataclass(frozen=True)
class NystromConfig:
    """Randomized eigendecomposition settings.

    ``l`` extra sketching directions are drawn on top of the target rank
    ``m`` to improve accuracy; by default ``l = m``.
    """

    m: int
    l: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise InputError("target rank m must be >= 1")
        if self.l is None:
            object.__setattr__(self, "l", self.m)
        if self.l < 0:
            raise InputError("oversampling count l must be >= 0")


@dataclass(frozen=True)
class ProjectionBasis:
    """An n-by-m random-effect basis together with its spectral factors.

    Attributes
    ----------
    M : ndarray, shape (n, m)
        The basis itself; the reduced random effect enters the linear
        predictor as ``M @ delta``.
    U : ndarray or None
        Orthonormal eigenvector factor (continuous constructions only).
    D : ndarray or None
        Positive eigenvalues, sorted descending (continuous only).
    phi_at_build : float or None
        Range parameter the basis was built for (continuous only).
    restricted : bool
        Whether the basis has been projected orthogonal to the covariates.
    mqm : ndarray or None
        Prior quadratic-form matrix ``M' Q M`` (discrete constructions only).
    mqm_logdet : float or None
        Pseudo log determinant of ``mqm`` (discrete only, cached).
    method : str
        One of ``exact``, ``nystrom``, ``moran``, ``chol_reference``,
        ``identity_reference``.
    seed : int or None
        Sketching seed (randomized construction only).
    """

    M: np.ndarray
    U: np.ndarray | None = None
    D: np.ndarray | None = None
    phi_at_build: float | None = None
    restricted: bool = False
    mqm: np.ndarray | None = None
    mqm_logdet: float | None = None
    method: str = "exact"
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def rank(self) -> int:
        return self.M.shape[1]

    def to_csv(self, path) -> None:
        """Dump the basis column-major to CSV with a header row (debugging aid)."""
        header = ",".join(f"b{j}" for j in range(self.rank))
        np.savetxt(path, self.M, delimiter=",", header=header, comments="")


def _descending_eigh(S: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``m`` eigenpairs of a symmetric matrix, eigenvalues descending."""
    n = S.shape[0]
    vals, vecs = eigh(S, subset_by_index=[n - m, n - 1])
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def exact_basis_continuous(R_phi: np.ndarray, m: int, *, phi: float | None = None) -> ProjectionBasis:
    """Basis from the leading ``m`` eigenpairs of a correlation matrix.

    Parameters
    ----------
    R_phi : ndarray, shape (n, n)
        Symmetric positive semi-definite correlation matrix.
    m : int
        Number of leading eigenpairs to keep, ``1 <= m <= n``.
    phi : float, optional
        Range parameter recorded on the basis for bookkeeping.

    Returns
    -------
    ProjectionBasis
        With ``U`` the eigenvectors, ``D`` the eigenvalues, and
        ``M = U sqrt(D)``.
    """
    R = np.asarray(R_phi, dtype=float)
    n = R.shape[0]
    if R.ndim != 2 or R.shape[1] != n:
        raise InputError("correlation matrix must be square")
    if not (1 <= m <= n):
        raise InputError(f"rank m must satisfy 1 <= m <= {n}, got {m}")
    vals, vecs = _descending_eigh(R, m)
    vals = np.clip(vals, 0.0, None)
    M = vecs * np.sqrt(vals)
    return ProjectionBasis(M=M, U=vecs, D=vals, phi_at_build=phi, method="exact")


def nystrom_basis(R_phi: np.ndarray, cfg: NystromConfig, *, phi: float | None = None) -> ProjectionBasis:
    """Randomized low-rank eigendecomposition of a PSD matrix.

    A Gaussian sketch ``Phi = R @ Omega`` with ``m + l`` columns is followed
    by an eigendecomposition of the small matrix ``Phi' R Phi`` and an SVD of
    ``[R Phi][V Lambda^{-1/2}]``; the leading ``m`` left singular vectors and
    squared singular values approximate the eigenpairs of ``R``.  The result
    is deterministic given ``cfg.seed`` and exact for matrices of rank at
    most ``m``.

    Raises
    ------
    RankDeficiencyError
        If fewer than ``m`` sketched directions survive the eigenvalue drop
        tolerance.
    """
    R = np.asarray(R_phi, dtype=float)
    n = R.shape[0]
    if R.ndim != 2 or R.shape[1] != n:
        raise InputError("input matrix must be square")
    m, l = cfg.m, cfg.l
    if m + l > n:
        raise InputError(f"m + l = {m + l} exceeds matrix size {n}")
    rng = np.random.default_rng(cfg.seed)
    omega = rng.standard_normal((n, m + l)) / np.sqrt(m + l)
    sketch = R @ omega
    small = sketch.T @ R @ sketch
    small = 0.5 * (small + small.T)
    lam, V = np.linalg.eigh(small)
    lam = lam[::-1]
    V = V[:, ::-1]
    keep = lam > DROP_TOL * max(lam[0], 0.0)
    if keep.sum() < m:
        raise RankDeficiencyError(
            f"only {int(keep.sum())} sketched directions survive the drop "
            f"tolerance; cannot produce rank {m}"
        )
    lam = lam[keep]
    V = V[:, keep]
    C = (R @ sketch) @ (V / np.sqrt(lam))
    Uc, s, _ = np.linalg.svd(C, full_matrices=False)
    U = Uc[:, :m]
    D = s[:m] ** 2
    M = U * np.sqrt(D)
    return ProjectionBasis(
        M=M, U=U, D=D, phi_at_build=phi, method="nystrom", seed=cfg.seed
    )


def moran_basis(graph: AdjacencyGraph, X, m: int) -> ProjectionBasis:
    """Basis of leading eigenvectors of the covariate-orthogonalized adjacency.

    Columns are orthonormal, orthogonal to the columns of ``X`` and, unlike
    the continuous constructions, are not scaled by their eigenvalues.  The
    prior quadratic form ``M' Q M`` is attached for the coefficient prior.
    """
    X = check_design(X, n=graph.n)
    p = X.shape[1]
    if not (1 <= m <= graph.n - p):
        raise InputError(f"rank m must satisfy 1 <= m <= n - p = {graph.n - p}, got {m}")
    op = moran_operator(graph, X)
    vals, vecs = _descending_eigh(op, m)
    Q = build_precision(graph)
    mqm = vecs.T @ Q @ vecs
    mqm = 0.5 * (mqm + mqm.T)
    lam = np.linalg.eigvalsh(mqm)
    kept = lam[lam > DROP_TOL * max(lam.max(), 0.0)]
    return ProjectionBasis(
        M=vecs, U=None, D=None, restricted=True, mqm=mqm,
        mqm_logdet=float(np.sum(np.log(kept))), method="moran",
    )


def restrict_basis(basis: ProjectionBasis, X) -> ProjectionBasis:
    """Project the basis columns orthogonal to the covariate column space.

    Idempotent: applying it to an already-restricted basis leaves the basis
    unchanged up to rounding.
    """
    X = check_design(X, n=basis.n)
    P = projection_complement(X)
    return replace(basis, M=P @ basis.M, restricted=True)


def select_rank(eigenvalues, target_fraction: float = 0.95) -> int:
    """Smallest rank capturing ``target_fraction`` of total spectral mass.

    ``eigenvalues`` must be nonnegative and sorted descending.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.ndim != 1 or lam.size == 0:
        raise InputError("eigenvalues must be a nonempty 1-D array")
    if np.any(lam < 0) or np.any(np.diff(lam) > 1e-12 * max(lam[0], 1.0)):
        raise InputError("eigenvalues must be nonnegative and sorted descending")
    total = lam.sum()
    if total <= 0:
        raise InputError("cannot select a rank from an all-zero spectrum")
    if not (0 < target_fraction <= 1):
        raise InputError("target_fraction must be in (0, 1]")
    frac = np.cumsum(lam) / total
    return int(np.searchsorted(frac, target_fraction - 1e-15) + 1)


@dataclass(frozen=True)
class BasisBuilder:
    """Recipe for rebuilding a continuous-domain basis at any range value.

    Fits re-evaluate the objective at candidate range parameters, each of
    which needs a fresh basis.  The builder pins everything except the range:
    rank, smoothness, construction method, sketching seed, and the optional
    restriction to the covariate complement.  The same sketching seed is
    reused at every range value so that candidate comparisons share their
    random directions.
    """

    m: int = 50
    nu: float = 2.5
    restricted: bool = False
    exact_threshold: int = 1000
    force_exact: bool = False
    oversample: int | None = None
    sketch_seed: int = 0

    def build(self, coords: np.ndarray, phi: float, X: np.ndarray | None = None) -> ProjectionBasis:
        n = coords.shape[0]
        m = min(self.m, n)
        R = correlation_matrix(coords, phi, self.nu)
        if self.force_exact or n <= self.exact_threshold:
            basis = exact_basis_continuous(R, m, phi=phi)
        else:
            cfg = NystromConfig(m=m, l=self.oversample, seed=self.sketch_seed)
            basis = nystrom_basis(R, cfg, phi=phi)
        if self.restricted:
            if X is None:
                raise InputError("restricted basis requires the design matrix")
            basis = restrict_basis(basis, X)
        return basis
