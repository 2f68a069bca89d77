"""Quadrature and importance-sampling normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densityfilter import classical as C
from densityfilter import models
from densityfilter.normalize import (
    NormalizationError,
    Proposal,
    UnconditionalMoments,
    build_ekf_proposal,
    build_wide_proposal,
    ekf_beliefs,
    is_normalize,
    log_is_normalize,
    log_quad_normalize,
    quad_normalize,
    quad_points,
)
from densityfilter.sim import TimeGrid, make_rng, simulate_pair


def std_normal(x):
    return -0.5 * (x**2).sum(-1) - 0.5 * x.shape[-1] * np.log(2 * np.pi)


class TestQuadrature:
    def test_points(self):
        x = quad_points(0.0, 1.0, 4)
        np.testing.assert_allclose(x[:, 0], [0.125, 0.375, 0.625, 0.875])

    def test_standard_normal(self):
        assert quad_normalize(std_normal, -10, 10, 10_000) == pytest.approx(1.0, abs=1e-4)

    def test_scaled(self):
        z = quad_normalize(lambda x: np.log(2.0) + std_normal(x), -10, 10, 10_000)
        assert z == pytest.approx(2.0, abs=2e-4)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.floats(-3, 3), st.floats(0.1, 10))
    def test_flat(self, logc, l, width):
        z = log_quad_normalize(lambda x: np.full(x.shape[:-1], logc), l, l + width, 16)
        assert z == pytest.approx(logc + np.log(width), abs=1e-10)

    def test_per_sequence_domain(self):
        l = np.array([-10.0, -4.0])
        r = np.array([10.0, 8.0])
        mu = np.array([0.0, 2.0])

        def lp(x):
            return std_normal(x - mu[:, None, None])

        np.testing.assert_allclose(quad_normalize(lp, l, r, 4000), 1.0, atol=1e-6)

    def test_errors(self):
        with pytest.raises(ValueError):
            quad_points(1.0, 1.0, 4)
        with pytest.raises(ValueError):
            log_quad_normalize(std_normal, 0.0, 1.0, 1)
        with pytest.raises(NormalizationError):
            log_quad_normalize(lambda x: np.full(x.shape[:-1], -np.inf), 0.0, 1.0, 4)


class TestProposal:
    def test_logpdf_matches_scipy(self, rng):
        from scipy.stats import multivariate_normal

        S = np.array([[2.0, 0.3], [0.3, 0.5]])
        q = Proposal("ekf_based", np.array([1.0, -1.0]), S, inflation=2.0)
        x = rng.standard_normal((7, 2))
        np.testing.assert_allclose(q.logpdf(x), multivariate_normal([1, -1], 2 * S).logpdf(x), rtol=1e-12)

    def test_batched_sampling(self, rng):
        q = Proposal("ekf_based", np.zeros((3, 2)), np.broadcast_to(np.eye(2), (3, 2, 2)))
        assert q.sample(rng, 5).shape == (3, 5, 2)
        assert q.logpdf(np.zeros((3, 5, 2))).shape == (3, 5)

    def test_validation(self):
        with pytest.raises(ValueError):
            Proposal("laplace", np.zeros(1), np.eye(1))
        with pytest.raises(ValueError):
            Proposal("wide_gaussian", np.zeros(1), np.eye(1), inflation=0.5)


class TestImportance:
    def test_exact_proposal(self, rng):
        q = Proposal("wide_gaussian", np.zeros(1), np.eye(1))
        z, ess = is_normalize(q.logpdf, q, 100, rng)
        assert z == pytest.approx(1.0, abs=1e-12) and ess == pytest.approx(100.0)
        z3, _ = is_normalize(lambda x: q.logpdf(x) + np.log(3.0), q, 100, rng)
        assert z3 == pytest.approx(3.0, rel=1e-12)

    def test_wider_proposal(self):
        q = Proposal("wide_gaussian", np.zeros(1), 4.0 * np.eye(1))
        z, _ = is_normalize(std_normal, q, 100_000, make_rng(0))
        assert z == pytest.approx(1.0, rel=0.02)

    def test_self_normalized_mean(self):
        q = Proposal("wide_gaussian", np.zeros(2), 4.0 * np.eye(2))
        res = log_is_normalize(lambda x: std_normal(x - 1.0), q, 100_000, make_rng(0))
        np.testing.assert_allclose(res.mean(), 1.0, atol=0.03)

    def test_low_ess_event(self, rng):
        q = Proposal("wide_gaussian", np.zeros(1), np.eye(1))
        events = []
        log_is_normalize(lambda x: std_normal((x - 6.0) / 0.05), q, 200, rng, events=events)
        assert events and events[0]["kind"] == "low ess"

    def test_proposal_mismatch(self, rng):
        q = Proposal("wide_gaussian", np.zeros(1), np.eye(1))
        with pytest.raises(NormalizationError):
            log_is_normalize(lambda x: np.full(x.shape[:-1], -np.inf), q, 10, rng)

    def test_quad_and_is_agree(self):
        # bimodal target with mass 0.7 + 1.3
        def lp(x):
            a = np.log(0.7) + std_normal((x - 2.0) / 0.5) - np.log(0.5)
            b = np.log(1.3) + std_normal((x + 1.0) / 0.8) - np.log(0.8)
            return np.logaddexp(a, b)

        zq = quad_normalize(lp, -12, 12, 20_000)
        q = Proposal("wide_gaussian", np.zeros(1), 9.0 * np.eye(1))
        res = log_is_normalize(lp, q, 20_000, make_rng(3))
        w = np.exp(res.log_w)
        se = w.std(ddof=1) / np.sqrt(w.size)
        assert zq == pytest.approx(2.0, abs=1e-6)
        assert abs(res.z - zq) < 3 * se

    def test_unbiased_over_replicates(self):
        q = Proposal("wide_gaussian", np.array([0.5]), 2.0 * np.eye(1))
        zs = np.array([is_normalize(lambda x: np.log(5.0) + std_normal(x), q, 200, make_rng(7, r))[0]
                       for r in range(200)])
        se = zs.std(ddof=1) / np.sqrt(zs.size)
        assert abs(zs.mean() - 5.0) < 3 * se


class TestProposals:
    @pytest.fixture(scope="class")
    @staticmethod
    def ou_obs():
        p = models.ou_model(1)
        grid = TimeGrid(1.0, 4, 8)
        _, obs = simulate_pair(p.model, p.obs, p.init, grid, make_rng(0), n_paths=3)
        return p, grid, obs.obs

    def test_ekf_equals_kf(self, ou_obs):
        p, grid, obs = ou_obs
        q = build_ekf_proposal(p.model, p.obs, p.init, obs, grid, 3, inflation=1.0)
        kf = C.run_gaussian_filter(C.kf_step, C.initial_belief(p.init, (3,)), p.model, p.obs, grid.T / grid.K, obs)
        np.testing.assert_allclose(q.mean, kf[2].mean, atol=1e-10)
        np.testing.assert_allclose(q.cov, kf[2].cov, atol=1e-10)

    def test_inflation(self, ou_obs):
        p, grid, obs = ou_obs
        q1 = build_ekf_proposal(p.model, p.obs, p.init, obs, grid, 2, inflation=1.0)
        q4 = build_ekf_proposal(p.model, p.obs, p.init, obs, grid, 2, inflation=4.0)
        np.testing.assert_allclose(q4.cov, 4 * q1.cov, rtol=1e-12)
        np.testing.assert_array_equal(q4.mean, q1.mean)

    def test_precomputed_beliefs(self, ou_obs):
        p, grid, obs = ou_obs
        beliefs = ekf_beliefs(p.model, p.obs, p.init, obs, grid)
        a = build_ekf_proposal(p.model, p.obs, p.init, obs, grid, 4, beliefs=beliefs)
        b = build_ekf_proposal(p.model, p.obs, p.init, obs, grid, 4)
        np.testing.assert_allclose(a.cov, b.cov, rtol=1e-12)

    def test_fallback(self, ou_obs):
        p, grid, obs = ou_obs
        bad = obs.copy()
        bad[1, 0, 0] = np.nan
        cache = UnconditionalMoments(p.model, p.init, grid, n_paths=2000)
        events = []
        q = build_ekf_proposal(p.model, p.obs, p.init, bad, grid, 2, inflation=2.0, fallback=cache,
                               fallback_inflation=3.0, events=events)
        assert [e["sequence"] for e in events] == [1]
        np.testing.assert_allclose(q.cov[1], 3.0 * cache.cov(2))
        assert np.all(np.isfinite(q.mean))
        with pytest.raises(NormalizationError):
            build_ekf_proposal(p.model, p.obs, p.init, bad, grid, 2)

    def test_wide_ou(self):
        p = models.ou_model(1)
        grid = TimeGrid(1.0, 2, 16)
        cache = UnconditionalMoments(p.model, p.init, grid, n_paths=20_000)
        q = build_wide_proposal(p.model, grid, 2, 3.0, cache, I=500)
        assert abs(q.mean[0]) < 0.03
        # var(t) = 1/2 + e^{-2t}/2 from a standard normal start
        assert q.base_cov[0, 0] == pytest.approx(0.5 + 0.5 * np.exp(-2.0), rel=0.05)
        again = build_wide_proposal(p.model, grid, 2, 3.0, cache, I=500)
        assert again.samples is q.samples
        lo, hi = cache.domain(2)
        assert lo < -5 and hi > 5

    def test_wide_requires_cache(self):
        p = models.ou_model(1)
        with pytest.raises(ValueError):
            build_wide_proposal(p.model, TimeGrid(1.0, 1, 1), 1)
