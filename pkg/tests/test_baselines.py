import numpy as np
import pytest

from robust_lds import baselines, distributions as dist
from robust_lds.kalman import GaussianBelief, KalmanFilter, LdsModel

from _oracles import replicate_se

X0 = GaussianBelief([0.0], [[1.0]])


def ar1_model(q=1.0, r=2.0):
    return LdsModel([[0.9]], [[1.0]], [[1.0]], dist.gaussian([0.0], [[q]]), dist.gaussian([0.0], [[r]]))


def ar1_data(T, seed, q=1.0, r=2.0):
    rng = np.random.default_rng(seed)
    x, xs, ys = 0.0, [], []
    for _ in range(T):
        x = 0.9 * x + np.sqrt(q) * rng.standard_normal()
        xs.append(x)
        ys.append([x + np.sqrt(r) * rng.standard_normal()])
    return np.array(xs), np.array(ys)


class TestBootstrapPF:
    def test_tracks_kalman_filter(self):
        model = ar1_model()
        _, ys = ar1_data(50, seed=1)
        kf_means, _, _ = KalmanFilter(model, X0).run(ys)
        out = baselines.lds_bootstrap_pf(model, X0, 10**5, seed=0).run(ys)
        err = out["mean"][:, 0] - kf_means[:, 0]
        se = replicate_se(lambda s: baselines.lds_bootstrap_pf(model, X0, 10**4, seed=s), ys,
                          lambda f, o: o["mean"][:, 0] - kf_means[:, 0], scale=np.sqrt(0.1))
        se_avg = replicate_se(lambda s: baselines.lds_bootstrap_pf(model, X0, 10**4, seed=s), ys,
                              lambda f, o: np.mean(o["mean"][:, 0] - kf_means[:, 0]), scale=np.sqrt(0.1))
        assert abs(err.mean()) < 3 * se_avg
        assert np.all(np.abs(err) < 5 * se)

    def test_deterministic_transition_collapses_cloud(self):
        pf = baselines.bootstrap_pf(lambda rng, n: np.zeros((n, 1)), lambda rng, x, k: x + 1.0,
                                    lambda y, x, k: -0.5 * (y - x[:, 0]) ** 2, 50, seed=0)
        for y in (0.3, 2.0, 5.0):
            pf.step(y)
            assert np.all(pf.x == pf.x[0])

    def test_single_particle(self):
        pf = baselines.lds_bootstrap_pf(ar1_model(), X0, 1, seed=0)
        for y in ar1_data(10, seed=2)[1]:
            est = pf.step(y)
            assert est.ess == 1.0
        assert np.isfinite(pf.log_likelihood)

    def test_custom_measurement_density(self):
        model = ar1_model()
        logpdf = lambda r: -np.abs(r[:, 0])  # noqa: E731
        out = baselines.lds_bootstrap_pf(model, X0, 100, seed=0, meas_logpdf=logpdf).run(ar1_data(5, 3)[1])
        assert out["mean"].shape == (5, 1)

    def test_degenerate_weights_raise(self):
        pf = baselines.lds_bootstrap_pf(ar1_model(), X0, 10, seed=0)
        with pytest.raises(baselines.WeightDegeneracyError):
            pf.step([np.inf])

    def test_requires_gaussian_process_noise(self):
        model = ar1_model().with_noises(dist.student_t([0.0], [[1.0]], 3.0), dist.gaussian([0.0], [[1.0]]))
        with pytest.raises(ValueError):
            baselines.lds_bootstrap_pf(model, X0, 10)


def imm_config(sigmas=(1.0, 50.0), P=((0.9, 0.1), (0.1, 0.9)), mu0=(0.5, 0.5)):
    modes = [ar1_model(q=s ** 2) for s in sigmas]
    return baselines.ImmConfig(modes, np.array(P), np.array(mu0))


class TestImm:
    def test_identical_modes_equal_kalman(self):
        P = np.array([[0.7, 0.3], [0.2, 0.8]])
        cfg = baselines.ImmConfig([ar1_model(), ar1_model()], P, np.array([0.9, 0.1]))
        _, ys = ar1_data(60, seed=4)
        means, covs, lls = KalmanFilter(ar1_model(), X0).run(ys)
        out = baselines.ImmFilter(cfg, X0).run(ys)
        np.testing.assert_allclose(out["mean"], means, atol=1e-10)
        np.testing.assert_allclose(out["cov"], covs, atol=1e-10)
        np.testing.assert_allclose(out["loglik_increment"], lls, atol=1e-10)
        stationary = np.array([0.4, 0.6])  # left eigenvector of P
        np.testing.assert_allclose(stationary @ P, stationary)
        np.testing.assert_allclose(out["mode_probs"][-1], stationary, atol=1e-10)

    def test_correct_mode_wins_without_switching(self):
        probs = []
        for seed in range(20):
            _, ys = ar1_data(80, seed=seed, q=1.0)
            cfg = imm_config(sigmas=(1.0, 4.0), P=np.eye(2))
            probs.append(baselines.ImmFilter(cfg, X0).run(ys)["mode_probs"][:, 0])
        avg = np.mean(probs, axis=0)
        checkpoints = avg[[0, 9, 19, 39, 79]]
        assert np.all(np.diff(checkpoints) > 0)
        assert avg[-1] > 0.9

    def test_simplex_every_step(self):
        _, ys = ar1_data(100, seed=5)
        ys[::7] += 40.0
        out = baselines.ImmFilter(imm_config(), X0).run(ys)
        mp = out["mode_probs"]
        assert np.all(mp >= 0)
        assert np.all(np.abs(mp.sum(axis=1) - 1) < 1e-12)

    def test_combination_identity(self):
        _, ys = ar1_data(20, seed=6)
        imm = baselines.ImmFilter(imm_config(), X0)
        for y in ys:
            est = imm.step(y)
            mu = est.mode_probs
            spread = np.einsum("j,jk,jl->kl", mu, imm.means - est.mean, imm.means - est.mean)
            avg = np.einsum("j,jkl->kl", mu, imm.covs)
            np.testing.assert_allclose(est.cov, avg + spread, rtol=1e-12)
            assert np.linalg.eigvalsh(est.cov - avg).min() >= -1e-12

    @pytest.mark.parametrize("P,mu0", [
        (((0.9, 0.2), (0.1, 0.9)), (0.5, 0.5)),
        (((0.9, 0.1), (0.1, 0.9)), (0.6, 0.6)),
        (((1.1, -0.1), (0.1, 0.9)), (0.5, 0.5)),
    ])
    def test_config_validation(self, P, mu0):
        with pytest.raises(ValueError):
            imm_config(P=P, mu0=mu0)

    def test_needs_two_modes(self):
        with pytest.raises(ValueError):
            baselines.ImmConfig([ar1_model()], np.eye(1), np.ones(1))

    def test_rejects_non_gaussian_modes(self):
        bad = ar1_model().with_noises(dist.student_t([0.0], [[1.0]], 3.0), dist.gaussian([0.0], [[1.0]]))
        with pytest.raises(ValueError):
            baselines.ImmConfig([bad, ar1_model()], np.eye(2), np.array([0.5, 0.5]))

    def test_imm_step_function(self):
        imm = baselines.ImmFilter(imm_config(), X0)
        est = baselines.imm_step(imm, [0.5])
        assert est.mean.shape == (1,) and imm.k == 1
