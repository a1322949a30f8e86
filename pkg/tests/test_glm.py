import numpy as np
import pytest

from sglmm.exceptions import InputError, UnsupportedParameterError
from sglmm.glm import (
    BERNOULLI_LOGIT,
    POISSON_LOG,
    PsiParams,
    conditional_loglik,
    conditional_mean_variance,
    family_from_name,
    initial_phi,
    irls_initial_estimates,
)


class TestConditionalLoglik:
    def test_poisson_zero_at_zero(self):
        assert conditional_loglik([0], [0.0], "poisson") == pytest.approx(-1.0)

    def test_bernoulli_log_half(self):
        assert conditional_loglik([1], [0.0], "bernoulli") == pytest.approx(-np.log(2))

    def test_poisson_two_at_log_two(self):
        got = conditional_loglik([2], [np.log(2)], "poisson")
        expected = 2 * np.log(2) - 2 - np.log(2)
        assert got == pytest.approx(expected)
        assert got == pytest.approx(-1.306853, abs=1e-6)

    def test_poisson_rejects_negative_and_fractional(self):
        with pytest.raises(InputError):
            conditional_loglik([-1], [0.0], "poisson")
        with pytest.raises(InputError):
            conditional_loglik([1.5], [0.0], "poisson")

    def test_bernoulli_rejects_other_values(self):
        with pytest.raises(InputError):
            conditional_loglik([2], [0.0], "bernoulli")

    def test_unknown_family(self):
        with pytest.raises(UnsupportedParameterError):
            family_from_name("gamma")


class TestMeanVariance:
    def test_bernoulli_at_zero(self):
        mean, var = conditional_mean_variance(np.array([0.0]), "bernoulli")
        assert mean[0] == pytest.approx(0.5)
        assert var[0] == pytest.approx(0.25)

    def test_poisson_at_zero(self):
        mean, var = conditional_mean_variance(np.array([0.0]), "poisson")
        assert mean[0] == pytest.approx(1.0)
        assert var[0] == pytest.approx(1.0)

    def test_bernoulli_extreme_eta_stable(self):
        mean, var = conditional_mean_variance(np.array([40.0, -40.0]), "bernoulli")
        assert abs(mean[0] - 1.0) < 1e-15
        assert abs(mean[1]) < 1e-15
        assert np.all(var >= 0)
        assert np.all(np.isfinite(var))

    @pytest.mark.parametrize("family", ["poisson", "bernoulli"])
    def test_derivatives_of_loglik(self, family):
        # d/deta log f = z - mean, -d2/deta2 = variance, per observation.
        rng = np.random.default_rng(17)
        fam = family_from_name(family)
        eta = rng.uniform(-2, 2, 20)
        z = fam.sample(rng, eta)
        h = 1e-6
        for i in range(20):
            def f(e):
                etai = eta.copy()
                etai[i] = e
                return conditional_loglik(z, etai, family)

            num_grad = (f(eta[i] + h) - f(eta[i] - h)) / (2 * h)
            mean, var = conditional_mean_variance(eta, family)
            assert num_grad == pytest.approx(z[i] - mean[i], rel=1e-6, abs=1e-6)
            h2 = 1e-4  # wider step: the second difference cancels catastrophically
            num_hess = (f(eta[i] + h2) - 2 * f(eta[i]) + f(eta[i] - h2)) / h2**2
            assert -num_hess == pytest.approx(var[i], rel=1e-4, abs=1e-5)


class TestIrls:
    def test_poisson_intercept_only(self):
        z = np.array([3, 2, 4, 3, 3, 3], dtype=float)
        X = np.ones((6, 1))
        res = irls_initial_estimates(z, X, family="poisson")
        assert res.converged
        assert res.beta[0] == pytest.approx(np.log(z.mean()), abs=1e-8)

    def test_bernoulli_balanced_intercept(self):
        z = np.array([0, 1, 0, 1, 0, 1], dtype=float)
        X = np.ones((6, 1))
        res = irls_initial_estimates(z, X, family="bernoulli")
        assert res.beta[0] == pytest.approx(0.0, abs=1e-8)

    def test_matches_newton_oracle(self):
        # Dense Newton on the Poisson log likelihood as an independent check.
        rng = np.random.default_rng(23)
        n, p = 80, 3
        X = np.column_stack([np.ones(n), rng.uniform(-1, 1, (n, p - 1))])
        beta_true = np.array([0.5, 1.0, -0.7])
        z = rng.poisson(np.exp(X @ beta_true)).astype(float)

        beta = np.zeros(p)
        for _ in range(200):
            mu = np.exp(X @ beta)
            g = X.T @ (z - mu)
            H = -X.T @ (X * mu[:, None])
            step = np.linalg.solve(H, g)
            beta = beta - step
            if np.max(np.abs(step)) < 1e-12:
                break

        res = irls_initial_estimates(z, X, family="poisson")
        np.testing.assert_allclose(res.beta, beta, atol=1e-6)

    def test_score_zero_at_solution(self):
        rng = np.random.default_rng(29)
        n = 60
        X = np.column_stack([np.ones(n), rng.uniform(size=n)])
        z = rng.poisson(np.exp(X @ np.array([0.3, 0.8]))).astype(float)
        res = irls_initial_estimates(z, X, family="poisson")
        mu = np.exp(X @ res.beta)
        assert np.linalg.norm(X.T @ (z - mu)) < 1e-6 * n

    def test_offset_supported(self):
        rng = np.random.default_rng(31)
        n = 200
        X = np.ones((n, 1))
        offset = np.log(rng.uniform(1, 5, n))
        z = rng.poisson(np.exp(0.7 + offset)).astype(float)
        res = irls_initial_estimates(z, X, offset=offset, family="poisson")
        assert res.beta[0] == pytest.approx(0.7, abs=0.2)

    def test_separation_warns(self):
        # Perfectly separated Bernoulli data diverge.
        X = np.column_stack([np.ones(10), np.arange(10.0)])
        z = (np.arange(10) >= 5).astype(float)
        with pytest.warns(UserWarning):
            res = irls_initial_estimates(z, X, family="bernoulli", max_iter=100)
        assert not res.converged
        assert np.all(np.isfinite(res.beta))


class TestInitialPhi:
    def test_two_points(self):
        assert initial_phi([(0, 0), (3, 4)]) == pytest.approx(5.0)

    def test_collinear_quartile(self):
        pts = [(0, 0), (1, 0), (2, 0), (3, 0)]
        assert initial_phi(pts) == pytest.approx(1.0)

    def test_positive_on_random_cloud(self):
        rng = np.random.default_rng(37)
        assert initial_phi(rng.uniform(0, 1000, (50, 2))) > 0

    def test_single_point_rejected(self):
        with pytest.raises(InputError):
            initial_phi([(0.0, 0.0)])


class TestPsiParams:
    def test_domain_detection(self):
        cont = PsiParams(beta=[1.0, 1.0], sigma2=1.0, phi=0.2)
        disc = PsiParams(beta=[1.0, 1.0], tau=6.0)
        assert cont.domain == "continuous"
        assert disc.domain == "discrete"
        assert cont.theta == 1.0
        assert disc.theta == 6.0

    def test_vector_round_trip(self):
        psi = PsiParams(beta=[0.5, -0.5], sigma2=2.0, phi=0.3)
        vec = psi.as_vector()
        np.testing.assert_allclose(vec, [0.5, -0.5, 2.0])
        psi2 = psi.with_vector(vec * 2)
        assert psi2.sigma2 == pytest.approx(4.0)
        assert psi2.phi == pytest.approx(0.3)

    def test_positivity_enforced(self):
        with pytest.raises(InputError):
            PsiParams(beta=[0.0], sigma2=-1.0, phi=0.2)
        with pytest.raises(InputError):
            PsiParams(beta=[0.0])

    def test_dict_round_trip(self):
        psi = PsiParams(beta=[1.0], tau=3.0)
        again = PsiParams.from_dict(psi.to_dict())
        assert again.tau == pytest.approx(3.0)
        assert again.domain == "discrete"
