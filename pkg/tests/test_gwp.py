import numpy as np
import pytest
from scipy import stats

from conftest import random_spd
from gwpdti.gwp import (
    ConditioningError,
    GwpParams,
    construct_field,
    construct_tensor,
    cross_kernel,
    default_hyperpriors,
    default_sigma2,
    gram,
    log_likelihood,
    log_prior_L,
    log_prior_theta,
    log_prior_u,
    mean_nn_spacing,
    sample_prior_u,
    se_kernel,
)
from gwpdti.spd import is_spd


def random_L(rng):
    L = np.tril(rng.normal(size=(3, 3)))
    L[np.diag_indices(3)] = np.abs(L[np.diag_indices(3)]) + 0.2
    return L


class TestKernel:
    def test_values(self):
        assert se_kernel([0, 0, 0], [1, 0, 0], 1.0) == pytest.approx(np.exp(-0.5), rel=1e-15)
        assert se_kernel([0, 0, 0], [1, 1, 0], 1.0) == pytest.approx(np.exp(-1.0), rel=1e-15)
        assert se_kernel([0, 0, 0], [2, 0, 0], 2.0) == pytest.approx(np.exp(-0.5), rel=1e-15)
        assert se_kernel([3, 1, 2], [3, 1, 2], 0.1) == 1.0

    def test_rejects_bad_theta(self):
        with pytest.raises(ValueError):
            se_kernel([0, 0, 0], [1, 0, 0], 0.0)

    def test_cross_kernel_matches_elementwise(self, rng):
        a, b = rng.normal(size=(7, 3)), rng.normal(size=(4, 3))
        want = np.array([[se_kernel(x, y, 0.8) for y in b] for x in a])
        np.testing.assert_allclose(cross_kernel(a, b, 0.8), want, rtol=1e-12, atol=1e-15)


class TestGram:
    def test_single_site(self):
        g = gram([[1.0, 2.0, 3.0]], 1.0)
        assert g.n == 1
        np.testing.assert_allclose(g.K, [[1 + 1e-8]])

    def test_coincident_sites_need_jitter(self):
        g = gram(np.zeros((3, 3)), 1.0)
        assert np.all(np.isfinite(g.chol))
        np.testing.assert_allclose(g.chol @ g.chol.T, g.K, atol=1e-14)

    def test_symmetric_pd(self, rng):
        g = gram(rng.uniform(0, 5, size=(30, 3)), 1.5)
        np.testing.assert_array_equal(g.K, g.K.T)
        assert np.linalg.eigvalsh(g.K).min() > 0
        x = rng.normal(size=30)
        np.testing.assert_allclose(g.K @ g.solve(x), x, rtol=1e-6, atol=1e-6)

    def test_scaling_invariance(self, rng):
        sites = rng.uniform(0, 4, size=(12, 3))
        a = gram(sites, 1.3, jitter=0.0)
        b = gram(3.0 * sites, 3.9, jitter=0.0)
        np.testing.assert_allclose(a.K, b.K, atol=1e-12)

    def test_conditioning_error(self):
        # identical sites give an exactly singular all-ones matrix
        with pytest.raises(ConditioningError):
            gram(np.zeros((50, 3)), 1.0, jitter=0.0, max_jitter=0.0)


class TestConstruct:
    def test_rank_one_example(self):
        u = np.zeros((5, 3))
        u[0] = [1, 0, 0]
        np.testing.assert_array_equal(construct_tensor(u, np.eye(3)), np.diag([1.0, 0, 0]))

    def test_identity_sum(self):
        u = np.zeros((3, 3))
        u[np.arange(3), np.arange(3)] = 1
        L = np.diag([1.0, 2.0, 3.0])
        np.testing.assert_allclose(construct_tensor(u, L), np.diag([1.0, 4.0, 9.0]))

    def test_field_matches_per_site(self, rng):
        u = rng.normal(size=(5, 3, 8))
        L = random_L(rng)
        D = construct_field(u, L)
        for n in range(8):
            want = sum(np.outer(L @ u[i, :, n], L @ u[i, :, n]) for i in range(5))
            np.testing.assert_allclose(D[n], want, rtol=1e-12)

    def test_spd_draws(self, rng):
        L = random_L(rng)
        D = construct_tensor(rng.normal(size=(10_000, 5, 3)), L)
        assert np.all(is_spd(D))

    def test_wishart_mean(self, rng):
        nu, L = 5, random_L(rng)
        D = construct_tensor(rng.normal(size=(100_000, nu, 3)), L)
        want = nu * L @ L.T
        se = D.std(axis=0, ddof=1) / np.sqrt(len(D))
        assert np.all(np.abs(D.mean(axis=0) - want) <= 3 * se)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            GwpParams(2, np.eye(3), 1.0, 1.0)
        with pytest.raises(ValueError):
            GwpParams(5, np.ones((3, 3)), 1.0, 1.0)
        with pytest.raises(ValueError):
            GwpParams(5, -np.eye(3), 1.0, 1.0)
        p = GwpParams(5, np.diag([1.0, 2, 3]), 0.1, 1.0)
        np.testing.assert_array_equal(p.scale_matrix, np.diag([1.0, 4, 9]))


class TestLikelihood:
    def test_exact_fit_is_zero(self, rng):
        u, L = rng.normal(size=(5, 3, 6)), random_L(rng)
        assert log_likelihood(construct_field(u, L), u, L, 0.1) == 0.0

    def test_value(self):
        u = np.zeros((5, 3, 2))
        S = np.stack([np.eye(3), 2 * np.eye(3)])
        # ||I||^2 + ||2I||^2 = 3 + 12
        assert log_likelihood(S, u, np.eye(3), 0.5) == pytest.approx(-15.0)

    def test_permutation_invariant(self, rng):
        u, L = rng.normal(size=(5, 3, 9)), random_L(rng)
        S = random_spd(rng, 9)
        p = rng.permutation(9)
        assert log_likelihood(S[p], u[..., p], L, 0.3) == pytest.approx(log_likelihood(S, u, L, 0.3))


class TestPriors:
    def test_theta_lognormal(self):
        med, sd = 2.0, 0.7
        dist = stats.lognorm(s=sd, scale=med)
        xs = np.array([0.3, 1.0, 2.0, 5.0])
        got = np.array([log_prior_theta(x, med, sd) for x in xs])
        want = dist.logpdf(xs)
        np.testing.assert_allclose(got - got[0], want - want[0], rtol=1e-12)
        with pytest.raises(ValueError):
            log_prior_theta(0.0, med, sd)

    def test_L_gaussian(self, rng):
        mean, L = random_L(rng), random_L(rng)
        want = stats.norm(mean[np.tril_indices(3)], 0.4).logpdf(L[np.tril_indices(3)]).sum()
        assert log_prior_L(L, mean, 0.4) == pytest.approx(want, rel=1e-12)

    def test_u_matches_multivariate_normal(self, rng):
        sites = rng.uniform(0, 3, size=(6, 3))
        g = gram(sites, 1.2)
        u = rng.normal(size=(5, 3, 6))
        mvn = stats.multivariate_normal(np.zeros(6), g.K)
        want = sum(mvn.logpdf(b) for b in u.reshape(-1, 6))
        assert log_prior_u(u, g) == pytest.approx(want, rel=1e-9)

    def test_prior_draw_covariance(self, rng):
        sites = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], float)
        g = gram(sites, 1.0)
        draws = np.concatenate([sample_prior_u(g, 5, rng).reshape(-1, 3) for _ in range(2000)])
        np.testing.assert_allclose(np.cov(draws.T), g.K, atol=0.03)


class TestHyperpriors:
    def test_nn_spacing(self):
        sites = np.array([[0, 0, 0], [2, 0, 0], [2, 3, 0]], float)
        assert mean_nn_spacing(sites) == pytest.approx((2 + 2 + 3) / 3)
        assert mean_nn_spacing(sites[:1]) == 1.0

    def test_defaults(self, rng):
        S = random_spd(rng, 20)
        sites = np.stack(np.meshgrid(np.arange(5), np.arange(4), [0], indexing="ij"), -1).reshape(-1, 3) * 2.0
        h = default_hyperpriors(S, sites, 5, 0.8)
        assert h.theta_median == pytest.approx(4.0)
        np.testing.assert_allclose(5 * h.L_mean @ h.L_mean.T, S.mean(axis=0), rtol=1e-12)
        back = type(h).from_dict(h.to_dict())
        assert back.theta_median == h.theta_median
        np.testing.assert_array_equal(back.L_mean, h.L_mean)

    def test_sigma2_scales_quadratically(self, rng):
        S = random_spd(rng, 10)
        assert default_sigma2(3 * S) == pytest.approx(9 * default_sigma2(S))
