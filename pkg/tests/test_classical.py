"""Kalman, EKF, EnKF and bootstrap particle filters."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densityfilter import classical as C
from densityfilter import models
from densityfilter.classical import (
    Ensemble,
    GaussianBelief,
    ParticleCloud,
    cloud_moments,
    enkf_step,
    ensemble_moments,
    ekf_step,
    kf_step,
    logsumexp,
    pf_step,
    resample_indices,
)
from densityfilter.models import ObservationModel
from densityfilter.sim import make_rng

from conftest import const_problem


def scalar_kf(m, P, dt, o):
    """Closed-form OU(1D) prediction followed by the conjugate update."""
    e = np.exp(-dt)
    m, P = m * e, P * e * e + 0.5 * (1 - e * e)
    K = P / (P + 1.0)
    return m + K * (o - m), (1 - K) * P


@pytest.fixture
def ou_obs():
    return make_rng(3).standard_normal((10, 1))


class TestKalman:
    def test_prediction_closed_form(self, ou1):
        b = C.kf_predict(GaussianBelief(np.zeros(1), np.eye(1)), ou1.model, 0.1)
        assert b.cov[0, 0] == pytest.approx(np.exp(-0.2) + (1 - np.exp(-0.2)) / 2, abs=1e-12)
        assert b.cov[0, 0] == pytest.approx(0.90937, abs=1e-5)

    def test_conjugate_update(self):
        b = C.kalman_update(np.zeros(1), np.eye(1), np.ones(1), np.zeros(1), np.eye(1), np.eye(1))
        assert b.mean[0] == pytest.approx(0.5) and b.cov[0, 0] == pytest.approx(0.5)

    def test_zero_innovation(self, ou1):
        pred = C.kf_predict(GaussianBelief(np.array([0.7]), np.eye(1)), ou1.model, 0.1)
        b = kf_step(GaussianBelief(np.array([0.7]), np.eye(1)), ou1.model, ou1.obs, 0.1, pred.mean)
        assert b.mean[0] == pytest.approx(pred.mean[0], abs=1e-14)

    def test_recursion_matches_closed_form(self, ou1, ou_obs):
        b = C.initial_belief(ou1.init)
        m, P = 0.0, 1.0
        for k in range(10):
            b = kf_step(b, ou1.model, ou1.obs, 0.1, ou_obs[k])
            m, P = scalar_kf(m, P, 0.1, ou_obs[k, 0])
            assert abs(b.mean[0] - m) < 1e-6 and abs(b.cov[0, 0] - P) < 1e-6

    def test_prior_moments_closed_form(self, ou1):
        b = C.kf_predict(GaussianBelief(np.array([2.0]), np.array([[3.0]])), ou1.model, 0.7)
        assert b.mean[0] == pytest.approx(2.0 * np.exp(-0.7), abs=1e-8)
        assert b.cov[0, 0] == pytest.approx(3.0 * np.exp(-1.4) + (1 - np.exp(-1.4)) / 2, abs=1e-8)

    def test_batched(self, ou1):
        obs = make_rng(0).standard_normal((5, 10, 1))
        beliefs = C.run_gaussian_filter(kf_step, C.initial_belief(ou1.init, (5,)), ou1.model, ou1.obs, 0.1, obs)
        for i in range(5):
            single = C.run_gaussian_filter(kf_step, C.initial_belief(ou1.init), ou1.model, ou1.obs, 0.1, obs[i])
            np.testing.assert_allclose(beliefs[-1].mean[i], single[-1].mean, rtol=1e-12)

    def test_requires_linear(self, bistable):
        with pytest.raises(C.FilterError):
            kf_step(C.initial_belief(bistable.init), bistable.model, bistable.obs, 0.1, np.zeros(1))

    def test_covariance_symmetric_pd(self):
        p = models.spring_mass_model(5, seed=2)
        obs = make_rng(1).standard_normal((10, 5))
        b = C.initial_belief(p.init)
        for k in range(10):
            b = kf_step(b, p.model, p.obs, 0.1, obs[k])
            assert np.abs(b.cov - b.cov.T).max() < 1e-10
            assert np.linalg.eigvalsh(b.cov).min() > 0


class TestEkf:
    @pytest.mark.parametrize("problem", [models.ou_model(3), models.spring_mass_model(5, seed=0)], ids=["ou", "lsm"])
    def test_equals_kf_on_linear(self, problem):
        rng = make_rng(4)
        d = problem.model.state_dim
        A = rng.standard_normal((d, d))
        b0 = GaussianBelief(rng.standard_normal(d), A @ A.T + np.eye(d))
        o = rng.standard_normal(problem.obs.obs_dim)
        a = kf_step(b0, problem.model, problem.obs, 0.1, o)
        b = ekf_step(b0, problem.model, problem.obs, 0.1, o)
        np.testing.assert_allclose(b.mean, a.mean, atol=1e-8)
        np.testing.assert_allclose(b.cov, a.cov, atol=1e-8)

    def test_large_R_no_update(self, ou1):
        obs = ObservationModel.linear([[1.0]], [[1e6]])
        b0 = GaussianBelief(np.array([0.3]), np.eye(1))
        pred = C.ekf_predict(b0, ou1.model, 0.1)
        b = ekf_step(b0, ou1.model, obs, 0.1, np.array([5.0]))
        assert abs(b.mean[0] - pred.mean[0]) < 1e-3

    def test_bistable_linearization(self, bistable):
        assert bistable.model.drift_jacobian(np.zeros(1))[0, 0] == -2.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_raises(self):
        p = models.bistable_model()
        with pytest.raises(C.FilterError):
            C.ekf_predict(GaussianBelief(np.array([50.0]), np.eye(1)), p.model, 1.0, substeps=4)


class TestEnkf:
    def test_gain_large_ensemble(self):
        p = const_problem(1, sigma=0.0)
        rng = make_rng(0)
        X = rng.standard_normal((1_000_000, 1))
        out = enkf_step(Ensemble(X), p.model, p.obs, 0.1, np.array([1.0]), rng)
        # with P = R = 1 the shift toward o = 1 is half the innovation on average
        assert out.members.mean() == pytest.approx(0.5, abs=0.005)
        m, P = ensemble_moments(out)
        assert P[0, 0] == pytest.approx(0.5, rel=0.01)

    def test_degenerate_ensemble(self):
        p = const_problem(1, sigma=0.0)
        X = np.full((50, 1), 0.3)
        out = enkf_step(Ensemble(X), p.model, p.obs, 0.1, np.array([2.0]), make_rng(1))
        np.testing.assert_allclose(out.members, 0.3, atol=1e-12)

    def test_relabel_equivariance(self):
        p = models.ou_model(2)
        X = make_rng(2).standard_normal((40, 2))
        perm = make_rng(3).permutation(40)
        o = np.array([0.5, -1.0])
        # zero substeps of noise: drive both with identical streams, then permute
        a = enkf_step(Ensemble(X), p.model, p.obs, 0.1, o, make_rng(5))
        noise_model = p.model
        rng = make_rng(5)
        Xp = C.propagate(noise_model, X, 0.1, 1, rng)[perm]
        hx = p.obs.h(Xp)
        Y = hx + rng.standard_normal(hx.shape)[perm] @ p.obs.chol_R.T
        Xc, Yc = Xp - Xp.mean(0), Y - Y.mean(0)
        K = (Xc.T @ Yc) @ np.linalg.inv(Yc.T @ Yc)
        b = Xp + (o - Y) @ K.T
        np.testing.assert_allclose(b, a.members[perm], atol=1e-10)

    def test_needs_two_members(self, ou1):
        with pytest.raises(ValueError):
            enkf_step(Ensemble(np.zeros((1, 1))), ou1.model, ou1.obs, 0.1, np.zeros(1), make_rng(0))


class TestParticleFilter:
    def test_symmetric_weights(self):
        p = const_problem(1)
        cloud = ParticleCloud(np.array([[-1.0], [1.0]]), np.log([0.5, 0.5]))
        X = cloud.particles
        lw = cloud.log_weights + C.log_likelihood(p.obs, np.zeros(1), X)
        w = np.exp(lw - logsumexp(lw))
        np.testing.assert_allclose(w, [0.5, 0.5])

    def test_systematic_uniform_one_copy_each(self):
        idx = resample_indices(np.full((3, 100), 0.01), make_rng(0))
        for row in idx:
            np.testing.assert_array_equal(np.sort(row), np.arange(100))

    def test_multinomial_expected_counts(self):
        w = np.array([0.1, 0.2, 0.7])
        idx = resample_indices(np.tile(w, (20_000, 1)), make_rng(0), "multinomial")
        np.testing.assert_allclose(np.bincount(idx.ravel(), minlength=3) / idx.size, w, atol=0.005)

    def test_bad_scheme(self):
        with pytest.raises(ValueError):
            resample_indices(np.full(4, 0.25), make_rng(0), "stratified-ish")

    def test_weights_after_step_uniform(self, ou1):
        cloud = ParticleCloud.from_prior(ou1.init, 500, make_rng(0), (3,))
        out = pf_step(cloud, ou1.model, ou1.obs, 0.1, np.ones((3, 1)), make_rng(1))
        np.testing.assert_allclose(logsumexp(out.log_weights, axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.normalized_weights(), 1 / 500)

    def test_collapse_marks_sequence(self):
        p = models.ou_model(1)
        obs = ObservationModel.linear([[1.0]], [[1e-300]])
        cloud = ParticleCloud.from_prior(p.init, 50, make_rng(0), (2,))
        events = []
        out = pf_step(cloud, p.model, obs, 0.1, np.array([[1e5], [0.0]]), make_rng(1), events=events)
        assert out.collapsed.tolist()[0] is True
        assert np.all(np.isnan(out.particles[0]))
        assert any(e["kind"] == "weight collapse" for e in events)

    def test_nonfinite_particles_dropped(self):
        cloud = ParticleCloud(np.array([[[0.0], [np.inf], [np.nan], [0.1]]]), np.log(np.full((1, 4), 0.25)))
        p = const_problem(1)
        out = pf_step(cloud, p.model, p.obs, 0.1, np.zeros((1, 1)), make_rng(0))
        assert np.all(np.isfinite(out.particles))
        assert not out.collapsed[0]

    def test_mean_close_to_kf(self, ou1, ou_obs):
        M = 20_000
        cloud = ParticleCloud.from_prior(ou1.init, M, make_rng(0))
        b = C.initial_belief(ou1.init)
        rng = make_rng(1)
        for k in range(10):
            cloud = pf_step(cloud, ou1.model, ou1.obs, 0.1, ou_obs[k], rng, substeps=16)
            b = kf_step(b, ou1.model, ou1.obs, 0.1, ou_obs[k])
        m, P = cloud_moments(cloud)
        assert abs(m[0] - b.mean[0]) < 5 * np.sqrt(b.cov[0, 0] / M) * 3


class TestMoments:
    def test_repeated_point(self):
        m, P = cloud_moments(ParticleCloud(np.full((5, 2), 1.5), np.log(np.full(5, 0.2))))
        np.testing.assert_allclose(P, 0.0, atol=1e-15)

    def test_two_points(self):
        m, P = cloud_moments(ParticleCloud(np.array([[-1.0], [1.0]]), np.log([0.5, 0.5])))
        assert m[0] == 0.0 and P[0, 0] == pytest.approx(2.0)
        m, P = ensemble_moments(Ensemble(np.array([[-1.0], [1.0]])))
        assert m[0] == 0.0 and P[0, 0] == pytest.approx(2.0)

    def test_point_mass_weight(self):
        with np.errstate(divide="ignore"):
            lw = np.log([1.0, 0.0])
        m, _ = cloud_moments(ParticleCloud(np.array([[3.0, 4.0], [-1.0, 2.0]]), lw))
        np.testing.assert_array_equal(m, [3.0, 4.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000))
    def test_mean_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((30, 2))
        lw = rng.standard_normal(30)
        perm = rng.permutation(30)
        a, _ = cloud_moments(ParticleCloud(X, lw))
        b, _ = cloud_moments(ParticleCloud(X[perm], lw[perm]))
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


class TestLogsumexp:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.one_of(st.floats(-1e300, 1e300), st.just(-np.inf)), min_size=1, max_size=20))
    def test_no_nan_with_finite_entry(self, vals):
        a = np.array(vals + [0.0])
        with np.errstate(over="ignore"):
            out = logsumexp(a)
        assert not np.isnan(out)
        small = a[np.abs(a) < 1e6]
        if small.size == a.size:
            assert np.exp(a - out).sum() == pytest.approx(1.0)

    def test_all_neg_inf(self):
        assert logsumexp(np.full(3, -np.inf)) == -np.inf

    def test_matches_scipy(self):
        from scipy.special import logsumexp as sls

        a = np.random.default_rng(0).standard_normal((4, 7)) * 300
        np.testing.assert_allclose(logsumexp(a, axis=-1), sls(a, axis=-1), rtol=1e-14)
