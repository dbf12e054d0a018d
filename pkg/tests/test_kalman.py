import numpy as np
import pytest
from scipy import integrate, stats

from robust_lds import distributions as dist, kalman
from robust_lds.kalman import GaussianBelief, KalmanFilter, LdsModel

from _oracles import random_stable_model


def scalar(m, v):
    return GaussianBelief([m], [[v]])


class TestPredict:
    def test_identity_dynamics(self):
        b = GaussianBelief([1.0, -2.0], [[2.0, 0.3], [0.3, 1.0]])
        out = kalman.predict(b, np.eye(2), np.eye(2), np.zeros(2), np.zeros((2, 2)))
        np.testing.assert_array_equal(out.mean, b.mean)
        np.testing.assert_array_equal(out.cov, b.cov)

    def test_scalar_hand_example(self):
        out = kalman.predict(scalar(1.0, 1.0), [[2.0]], [[1.0]], [0.5], [[3.0]])
        assert out.mean[0] == pytest.approx(2.5)
        assert out.cov[0, 0] == pytest.approx(7.0)

    def test_scalar_example_against_monte_carlo(self):
        rng = np.random.default_rng(0)
        x = rng.normal(1.0, 1.0, 10**6)
        nxt = 2.0 * x + rng.normal(0.5, np.sqrt(3.0), x.size)
        assert abs(nxt.mean() - 2.5) < 0.02
        assert abs(nxt.var() / 7.0 - 1) < 0.01

    def test_zero_dynamics_forgets_state(self):
        B = np.array([[1.0], [2.0]])
        out = kalman.predict(GaussianBelief([5.0, 5.0], np.eye(2) * 9), np.zeros((2, 2)), B, [0.7], [[2.0]])
        np.testing.assert_allclose(out.mean, B @ [0.7])
        np.testing.assert_allclose(out.cov, B @ [[2.0]] @ B.T)

    def test_batched(self):
        means = np.arange(6.0).reshape(3, 2)
        covs = np.repeat(np.eye(2)[None], 3, axis=0)
        A = np.array([[1.0, 1.0], [0.0, 1.0]])
        Q = np.array([[0.5, 0.0], [0.0, 0.25]])[None] * np.array([1.0, 2.0, 3.0])[:, None, None]
        out = kalman.predict(GaussianBelief(means, covs), A, np.eye(2), np.zeros(2), Q)
        for i in range(3):
            single = kalman.predict(GaussianBelief(means[i], covs[i]), A, np.eye(2), np.zeros(2), Q[i])
            np.testing.assert_allclose(out.mean[i], single.mean, rtol=1e-15)
            np.testing.assert_allclose(out.cov[i], single.cov, rtol=1e-15)


class TestUpdate:
    def test_scalar_conjugate(self):
        post, lik = kalman.update(scalar(0.0, 1.0), [[1.0]], [0.0], [[1.0]], [2.0])
        assert post.mean[0] == pytest.approx(1.0)
        assert post.cov[0, 0] == pytest.approx(0.5)
        assert lik.logpdf_at([2.0]) == pytest.approx(stats.norm.logpdf(2.0, 0.0, np.sqrt(2.0)))

    def test_scalar_likelihood_by_quadrature(self):
        # p(y) = int N(y; x, 1) N(x; 0, 1) dx
        _, lik = kalman.update(scalar(0.0, 1.0), [[1.0]], [0.0], [[1.0]], [2.0])
        val, _ = integrate.quad(lambda x: stats.norm.pdf(2.0, x, 1.0) * stats.norm.pdf(x), -np.inf, np.inf)
        assert float(lik.logpdf_at([2.0])) == pytest.approx(np.log(val), abs=1e-9)

    def test_uninformative_measurement(self):
        prior = GaussianBelief([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
        post, _ = kalman.update(prior, [[1.0, 0.0]], [0.0], [[1e12]], [50.0])
        np.testing.assert_allclose(post.mean, prior.mean, rtol=1e-6)
        np.testing.assert_allclose(post.cov, prior.cov, rtol=1e-6)

    def test_measurement_mean_translation(self):
        prior = GaussianBelief([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
        C, R, y = np.array([[1.0, 1.0]]), np.array([[0.5]]), np.array([4.0])
        p0, l0 = kalman.update(prior, C, [0.0], R, y)
        p1, l1 = kalman.update(prior, C, [1.5], R, y + 1.5)
        np.testing.assert_allclose(l1.mu_L, l0.mu_L + 1.5)
        np.testing.assert_allclose(p1.mean, p0.mean, rtol=1e-14)
        np.testing.assert_allclose(p1.cov, p0.cov, rtol=1e-14)

    def test_rectangular_observation(self):
        # ny != nx exercises K C P rather than K C^T P
        rng = np.random.default_rng(1)
        A, B, C, Q, R = random_stable_model(rng, 3, ny=2)
        prior = GaussianBelief(rng.standard_normal(3), Q[:3, :3] if Q.shape[0] >= 3 else np.eye(3))
        post, lik = kalman.update(prior, C, np.zeros(2), R, rng.standard_normal(2))
        assert post.cov.shape == (3, 3) and lik.Sigma_L.shape == (2, 2)

    @pytest.mark.parametrize("seed", range(20))
    def test_joseph_form(self, seed):
        rng = np.random.default_rng(seed)
        nx, ny = rng.integers(1, 5, size=2)
        A, B, C, Q, R = random_stable_model(rng, nx, ny=ny)
        G = rng.standard_normal((nx, nx))
        P = G @ G.T + 0.1 * np.eye(nx)
        post, _ = kalman.update(GaussianBelief(np.zeros(nx), P), C, np.zeros(ny), R, rng.standard_normal(ny))
        K = P @ C.T @ np.linalg.inv(C @ P @ C.T + R)
        I_KC = np.eye(nx) - K @ C
        joseph = I_KC @ P @ I_KC.T + K @ R @ K.T
        np.testing.assert_allclose(post.cov, joseph, rtol=1e-9, atol=1e-12 * np.abs(joseph).max())

    @pytest.mark.parametrize("seed", range(20))
    def test_update_shrinks_covariance(self, seed):
        rng = np.random.default_rng(100 + seed)
        A, B, C, Q, R = random_stable_model(rng, 3, ny=2)
        P = Q + np.eye(3)
        post, _ = kalman.update(GaussianBelief(np.zeros(3), P), C, np.zeros(2), R, np.ones(2))
        assert np.linalg.eigvalsh(P - post.cov).min() > -1e-10
        np.testing.assert_array_equal(post.cov, post.cov.T)

    def test_rank_deficient_innovation_gets_jitter(self, caplog):
        prior = GaussianBelief([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
        with caplog.at_level("WARNING"):
            post, lik = kalman.update(prior, np.eye(2), [0.0, 0.0], np.zeros((2, 2)), [1.0, 1.0])
        assert "jitter" in caplog.text
        assert np.isfinite(post.mean).all() and np.isfinite(lik.chol).all()

    def test_zero_innovation_covariance_raises(self):
        with pytest.raises(np.linalg.LinAlgError):
            kalman.update(scalar(0.0, 0.0), [[1.0]], [0.0], [[0.0]], [0.0])


class TestPStep:
    def test_one_step_is_predict(self):
        rng = np.random.default_rng(2)
        A, B, C, Q, R = random_stable_model(rng, 3)
        model = LdsModel(A, B, C, dist.gaussian(np.zeros(3), Q), dist.gaussian(np.zeros(3), R))
        b = GaussianBelief(rng.standard_normal(3), Q)
        mu = rng.standard_normal(3)
        one = kalman.predict(b, A, B, mu, Q)
        p = kalman.predict_p_step(b, model, [mu], [Q], k=4, p=1)
        np.testing.assert_allclose(p.mean, one.mean, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(p.cov, one.cov, rtol=1e-15, atol=1e-15)

    def test_random_walk_accumulation(self):
        q = 0.7
        model = LdsModel(np.eye(2), np.eye(2), np.eye(2), dist.gaussian(np.zeros(2), np.eye(2)),
                         dist.gaussian(np.zeros(2), np.eye(2)))
        b = GaussianBelief([1.0, 2.0], [[2.0, 0.1], [0.1, 1.0]])
        out = kalman.predict_p_step(b, model, [np.zeros(2)] * 3, [q * np.eye(2)] * 3, k=0, p=3)
        np.testing.assert_allclose(out.mean, b.mean)
        np.testing.assert_allclose(out.cov, b.cov + 3 * q * np.eye(2))

    def test_two_step_hand_example(self):
        model = LdsModel([[0.5]], [[1.0]], [[1.0]], dist.gaussian([0.0], [[1.0]]), dist.gaussian([0.0], [[1.0]]))
        out = kalman.predict_p_step(scalar(4.0, 0.0), model, [[0.0]] * 2, [[[1.0]]] * 2, k=0, p=2)
        assert out.mean[0] == pytest.approx(1.0)
        assert out.cov[0, 0] == pytest.approx(1.25)

    def test_matches_iterated_predict_time_varying(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            nx = int(rng.integers(1, 5))
            T = 12
            mats = [random_stable_model(rng, nx) for _ in range(T)]
            As = np.array([m[0] for m in mats])
            Bs = np.array([m[1] for m in mats])
            model = LdsModel(As, Bs, np.eye(nx), dist.gaussian(np.zeros(nx), np.eye(nx)),
                             dist.gaussian(np.zeros(nx), np.eye(nx)))
            k, p = int(rng.integers(0, 4)), int(rng.integers(1, 8))
            mus = [rng.standard_normal(nx) for _ in range(p)]
            Qs = [m[3] for m in mats[:p]]
            b = GaussianBelief(rng.standard_normal(nx), mats[-1][3])
            it = b
            for j in range(1, p + 1):
                it = kalman.predict(it, model.A(k + j), model.B(k + j), mus[j - 1], Qs[j - 1])
            out = kalman.predict_p_step(b, model, mus, Qs, k, p)
            np.testing.assert_allclose(out.mean, it.mean, rtol=1e-12, atol=1e-12 * np.abs(it.mean).max())
            np.testing.assert_allclose(out.cov, it.cov, rtol=1e-12, atol=1e-12 * np.abs(it.cov).max())

    def test_horizon_beyond_schedule(self):
        model = LdsModel(np.ones((3, 1, 1)), [[1.0]], [[1.0]], dist.gaussian([0.0], [[1.0]]),
                         dist.gaussian([0.0], [[1.0]]))
        with pytest.raises(ValueError, match="schedule"):
            kalman.predict_p_step(scalar(0.0, 1.0), model, [[0.0]] * 5, [[[1.0]]] * 5, k=1, p=5)

    def test_rejects_zero_horizon(self):
        model = LdsModel([[1.0]], [[1.0]], [[1.0]], dist.gaussian([0.0], [[1.0]]), dist.gaussian([0.0], [[1.0]]))
        with pytest.raises(ValueError):
            kalman.predict_p_step(scalar(0.0, 1.0), model, [], [], k=1, p=0)


class TestModel:
    def test_dimension_check(self):
        with pytest.raises(ValueError, match="B"):
            LdsModel(np.eye(2), np.eye(3), np.eye(2), dist.gaussian(np.zeros(2), np.eye(2)),
                     dist.gaussian(np.zeros(2), np.eye(2)))

    def test_callable_schedule(self):
        s = kalman.Schedule(lambda k: [[float(k)]])
        assert s(3)[0, 0] == 3.0
        with pytest.raises(IndexError):
            s(0)

    def test_kalman_filter_requires_gaussian(self):
        model = LdsModel([[1.0]], [[1.0]], [[1.0]], dist.student_t([0.0], [[1.0]], 3.0),
                         dist.gaussian([0.0], [[1.0]]))
        with pytest.raises(ValueError):
            KalmanFilter(model, scalar(0.0, 1.0))

    def test_kalman_filter_loglik_is_joint_density(self):
        # the sum of increments equals log N(y_{1:T}; 0, Cov) for a random walk
        T = 6
        model = LdsModel([[1.0]], [[1.0]], [[1.0]], dist.gaussian([0.0], [[0.5]]), dist.gaussian([0.0], [[2.0]]))
        ys = np.random.default_rng(4).standard_normal(T) * 2
        kf = KalmanFilter(model, scalar(0.0, 1.0))
        kf.run(ys[:, None])
        idx = np.arange(1, T + 1)
        cov = 1.0 + 0.5 * np.minimum.outer(idx, idx) + 2.0 * np.eye(T)
        assert kf.loglik == pytest.approx(stats.multivariate_normal(np.zeros(T), cov).logpdf(ys), abs=1e-10)
