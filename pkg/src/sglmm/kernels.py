"""Spatial building blocks: covariance matrices, graph precision matrices,
and the covariate-orthogonalized adjacency operator.

Two spatial domains are supported.  Point-referenced (continuous) data use a
Matern correlation over Euclidean distances; areal (discrete) data use the
graph Laplacian precision ``Q = diag(A 1) - A`` of an undirected adjacency
structure.  All functions are pure and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import InputError, NumericalError, UnsupportedParameterError
from .validation import check_coordinates, check_design, check_positive_scalar

#: Relative diagonal jitter added to covariance matrices before factorization.
JITTER = 1e-10

_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class MaternConfig:
    """Matern covariance parameters: variance, range, and smoothness."""

    sigma2: float
    phi: float
    nu: float = 2.5

    def __post_init__(self):
        check_positive_scalar(self.sigma2, "sigma2")
        check_positive_scalar(self.phi, "phi")
        if self.nu not in (0.5, 1.5, 2.5):
            raise UnsupportedParameterError(
                f"nu must be one of 0.5, 1.5, 2.5; got {self.nu}"
            )


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected graph on nodes ``0..n-1`` given as a list of edges.

    Self-loops are rejected; duplicate and reversed edge listings collapse to
    a single undirected edge.
    """

    n: int
    edges: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.n < 1:
            raise InputError("graph must have at least one node")
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise InputError(f"self-loop at node {i} is not allowed")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise InputError(f"edge ({i}, {j}) references a node outside [0, {self.n})")
            seen.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", tuple(sorted(seen)))

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency matrix with zero diagonal."""
        A = np.zeros((self.n, self.n))
        for i, j in self.edges:
            A[i, j] = 1.0
            A[j, i] = 1.0
        return A

    @classmethod
    def lattice(cls, rows: int, cols: int) -> "AdjacencyGraph":
        """Rook-neighbour lattice with ``rows * cols`` nodes in row-major order."""
        if rows < 1 or cols < 1:
            raise InputError("lattice dimensions must be positive")
        edges = []
        for r in range(rows):
            for c in range(cols):
                k = r * cols + c
                if c + 1 < cols:
                    edges.append((k, k + 1))
                if r + 1 < rows:
                    edges.append((k, k + cols))
        return cls(rows * cols, tuple(edges))


def read_edge_list(path) -> AdjacencyGraph:
    """Read an adjacency graph from a plain-text edge list.

    Format: one ``i j`` pair of 0-based node indices per line, whitespace
    separated; lines starting with ``#`` are comments.  The node count is
    ``max index + 1`` unless a ``# n <count>`` comment declares it.
    """
    edges = []
    n_declared = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                parts = text[1:].split()
                if len(parts) == 2 and parts[0] == "n":
                    n_declared = int(parts[1])
                continue
            parts = text.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'i j', got {text!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: non-integer node index") from exc
            edges.append((i, j))
    if not edges and n_declared is None:
        raise InputError(f"{path}: empty edge list and no '# n <count>' header")
    n = n_declared if n_declared is not None else max(max(e) for e in edges) + 1
    return AdjacencyGraph(n, tuple(edges))


def write_edge_list(path, graph: AdjacencyGraph) -> None:
    """Write ``graph`` in the edge-list format accepted by :func:`read_edge_list`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n {graph.n}\n")
        for i, j in graph.edges:
            fh.write(f"{i} {j}\n")


def distance_matrix(coords) -> np.ndarray:
    """Pairwise Euclidean distances between planar coordinates.

    Parameters
    ----------
    coords : array-like, shape (n, 2)
        Point locations in planar units.

    Returns
    -------
    ndarray, shape (n, n)
        Symmetric nonnegative distance matrix with zero diagonal.
    """
    pts = check_coordinates(coords)
    d = cdist(pts, pts)
    # cdist is symmetric up to rounding; enforce it exactly.
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def matern_correlation(h, phi: float, nu: float = 2.5):
    """Matern correlation at distance ``h`` for range ``phi`` and smoothness ``nu``.

    Closed forms for half-integer smoothness:

    * ``nu = 0.5``:  ``exp(-h/phi)``
    * ``nu = 1.5``:  ``(1 + sqrt(3) h/phi) exp(-sqrt(3) h/phi)``
    * ``nu = 2.5``:  ``(1 + sqrt(5) h/phi + 5 h^2 / (3 phi^2)) exp(-sqrt(5) h/phi)``

    Accepts scalar or array ``h``; the result is in ``(0, 1]`` with value 1 at
    ``h = 0`` and is nonincreasing in ``h``.
    """
    check_positive_scalar(phi, "phi")
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise InputError("distances must be nonnegative")
    r = h / phi
    if nu == 0.5:
        out = np.exp(-r)
    elif nu == 1.5:
        a = _SQRT3 * r
        out = (1.0 + a) * np.exp(-a)
    elif nu == 2.5:
        a = _SQRT5 * r
        out = (1.0 + a + (5.0 / 3.0) * r * r) * np.exp(-a)
    else:
        raise UnsupportedParameterError(f"nu must be one of 0.5, 1.5, 2.5; got {nu}")
    return out if out.ndim else float(out)


def correlation_matrix(coords, phi: float, nu: float = 2.5) -> np.ndarray:
    """Matern correlation matrix over a coordinate set (unit diagonal)."""
    R = matern_correlation(distance_matrix(coords), phi, nu)
    np.fill_diagonal(R, 1.0)
    return R


def cross_correlation(coords_a, coords_b, phi: float, nu: float = 2.5) -> np.ndarray:
    """Matern correlation between two coordinate sets, shape (na, nb)."""
    a = check_coordinates(coords_a, name="coords_a")
    b = check_coordinates(coords_b, name="coords_b")
    return matern_correlation(cdist(a, b), phi, nu)


def build_covariance(coords, cfg: MaternConfig) -> np.ndarray:
    """Matern covariance matrix ``sigma2 * R_phi + jitter`` over coordinates.

    A relative diagonal jitter of ``JITTER * sigma2`` keeps the matrix
    factorizable in the presence of near-duplicate points.  Raises
    :class:`NumericalError` if the Cholesky factorization still fails.
    """
    R = correlation_matrix(coords, cfg.phi, cfg.nu)
    C = cfg.sigma2 * R
    C[np.diag_indices_from(C)] += JITTER * cfg.sigma2
    try:
        np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "covariance matrix is not positive definite after jitter"
        ) from exc
    return C


def build_precision(graph: AdjacencyGraph) -> np.ndarray:
    """Graph Laplacian precision matrix ``Q = diag(A 1) - A``.

    Row sums are exactly zero and the matrix is symmetric positive
    semi-definite with rank at most ``n - 1``.
    """
    A = graph.adjacency()
    Q = np.diag(A.sum(axis=1)) - A
    return Q


def projection_complement(X) -> np.ndarray:
    """Projector onto the orthogonal complement of the column space of ``X``."""
    X = check_design(X)
    # QR is numerically safer than forming (X'X)^{-1} directly.
    q, _ = np.linalg.qr(X)
    P = q @ q.T
    return np.eye(X.shape[0]) - P


def moran_operator(graph: AdjacencyGraph, X) -> np.ndarray:
    """Adjacency operator restricted to the complement of the covariate span.

    Computes ``P A P`` where ``P`` projects orthogonally to the columns of
    ``X``.  Columns of ``X`` are annihilated by the result, which makes the
    leading eigenvectors of the output a spatial basis free of confounding
    with the covariates.
    """
    X = check_design(X, n=graph.n)
    P = projection_complement(X)
    A = graph.adjacency()
    M = P @ A @ P
    return 0.5 * (M + M.T)
