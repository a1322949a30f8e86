"""Scikit-learn style estimators wrapping the Monte Carlo ML fitters.

``ContinuousSGLMM`` treats the first two feature columns as planar
coordinates; the whole feature matrix (coordinates included) forms the
regression design, matching the convention of the simulation scenarios.
``LatticeSGLMM`` takes the adjacency graph as a fit-time argument.  Both
expose ``get_params``/``set_params`` through ``BaseEstimator`` so they
compose with model selection and pipeline tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import InputError
from .kernels import AdjacencyGraph
from .mcml import McmlConfig, fit_continuous, fit_discrete
from .predict import predict_w_star, reconstruct_w
from .validation import as_float_array


class _SglmmBase(BaseEstimator):
    def _config(self, **extra) -> McmlConfig:
        return McmlConfig(
            m=self.m, family=self.family, ess_search_mult=self.ess_search_mult,
            ess_final_mult=self.ess_final_mult, epsilon=self.epsilon,
            outer_cap=self.outer_cap, proposal_sd=self.proposal_sd,
            seed=self.seed, **extra,
        )

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError(
                f"{type(self).__name__} instance is not fitted yet; call fit first"
            )

    @property
    def converged_(self) -> bool:
        self._check_fitted()
        return self.result_.converged


class ContinuousSGLMM(_SglmmBase):
    """Spatial GLMM on a continuous domain via projected Monte Carlo ML.

    Parameters
    ----------
    family : {"poisson", "bernoulli"}
        Response family with its canonical link.
    m : int
        Projection rank of the random effect.
    nu : float
        Matern smoothness (0.5, 1.5, or 2.5).
    restricted : bool
        Project the spatial basis orthogonal to the design to remove
        confounding between fixed and random effects.
    seed : int
        Master seed; all chains and sketches derive from it.

    Attributes
    ----------
    coef_ : ndarray
        Estimated regression coefficients.
    sigma2_, phi_ : float
        Estimated variance and range of the latent field.
    result_ : McmlFit
        The full fit object (covariances, trace, diagnostics).
    """

    def __init__(self, family="poisson", m=50, nu=2.5, restricted=False,
                 epsilon=0.5, ess_search_mult=3.0, ess_final_mult=20.0,
                 proposal_sd="auto", outer_cap=50, seed=0):
        self.family = family
        self.m = m
        self.nu = nu
        self.restricted = restricted
        self.epsilon = epsilon
        self.ess_search_mult = ess_search_mult
        self.ess_final_mult = ess_final_mult
        self.proposal_sd = proposal_sd
        self.outer_cap = outer_cap
        self.seed = seed

    def _split(self, X):
        X = as_float_array(X, "X", ndim=2)
        if X.shape[1] < 2:
            raise InputError("X needs at least the two coordinate columns")
        return X[:, :2], X

    def fit(self, X, y, offset=None):
        """Fit the model; columns 0 and 1 of ``X`` are the coordinates."""
        coords, design = self._split(X)
        cfg = self._config(nu=self.nu, restricted=self.restricted)
        self.result_ = fit_continuous(y, design, coords, cfg, offset=offset)
        self.coef_ = self.result_.psi_hat.beta
        self.sigma2_ = self.result_.psi_hat.sigma2
        self.phi_ = self.result_.psi_hat.phi
        self.n_features_in_ = design.shape[1]
        return self

    def predict(self, X):
        """Response-scale conditional mean at new sites."""
        self._check_fitted()
        coords, design = self._split(X)
        if design.shape[1] != self.n_features_in_:
            raise InputError(f"X has {design.shape[1]} columns, expected {self.n_features_in_}")
        res = predict_w_star(self.result_, coords_new=coords, X_new=design)
        return res.response_scale_mean

    def predict_latent(self, X):
        """Mean and variance of the latent field at new sites."""
        self._check_fitted()
        coords, _ = self._split(X)
        res = predict_w_star(self.result_, coords_new=coords)
        return res.w_star_mean, res.w_star_var


class LatticeSGLMM(_SglmmBase):
    """Spatial GLMM on a lattice (areal) domain via projected Monte Carlo ML.

    The adjacency graph is data, not a hyperparameter, and is passed to
    ``fit`` alongside the design matrix.
    """

    def __init__(self, family="poisson", m=50, epsilon=0.5, ess_search_mult=3.0,
                 ess_final_mult=20.0, proposal_sd="auto", outer_cap=50, seed=0):
        self.family = family
        self.m = m
        self.epsilon = epsilon
        self.ess_search_mult = ess_search_mult
        self.ess_final_mult = ess_final_mult
        self.proposal_sd = proposal_sd
        self.outer_cap = outer_cap
        self.seed = seed

    def fit(self, X, y, graph: AdjacencyGraph = None, offset=None):
        if graph is None:
            raise InputError("LatticeSGLMM.fit requires the adjacency graph")
        X = as_float_array(X, "X", ndim=2)
        cfg = self._config()
        self.result_ = fit_discrete(y, X, graph, cfg, offset=offset)
        self.coef_ = self.result_.psi_hat.beta
        self.tau_ = self.result_.psi_hat.tau
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X=None, offset=None):
        """Response-scale fitted mean at the training nodes."""
        self._check_fitted()
        fit = self.result_
        X = fit.X if X is None else as_float_array(X, "X", ndim=2)
        if X.shape[0] != fit.basis.n:
            raise InputError("lattice predictions are defined at the training nodes")
        from .glm import family_from_name

        w = reconstruct_w(fit)
        eta = X @ fit.psi_hat.beta + w
        if offset is not None:
            eta = eta + np.asarray(offset, dtype=float)
        elif fit.offset is not None:
            eta = eta + fit.offset
        return family_from_name(fit.family).linkinv(eta)

    def predict_latent(self):
        """Fitted latent field at the training nodes."""
        self._check_fitted()
        return reconstruct_w(self.result_)
