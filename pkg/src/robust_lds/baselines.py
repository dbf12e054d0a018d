"""Reference filters: fixed-noise Kalman filter, bootstrap PF and IMM."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kalman
from .distributions import Family
from .kalman import GaussianBelief, KalmanFilter, LdsModel
from .rbpf import WeightDegeneracyError, ess, logsumexp, normalize_log_weights, resample_systematic

__all__ = ["KalmanFilter", "BootstrapPF", "ImmConfig", "ImmFilter", "bootstrap_pf", "lds_bootstrap_pf"]


@dataclass(frozen=True)
class PfEstimate:
    mean: np.ndarray
    var: np.ndarray
    ess: float
    loglik_increment: float

    @property
    def mc_stderr(self) -> np.ndarray:
        """Rough Monte Carlo standard error of the mean, ``sqrt(var / ESS)``."""
        return np.sqrt(self.var / self.ess)


class BootstrapPF:
    """Sampling-importance-resampling filter on the full state.

    ``init_sampler(rng, n)`` draws the initial cloud ``(n, d)``;
    ``transition(rng, x, k)`` propagates it to step ``k``;
    ``loglik(y, x, k)`` returns per-particle observation log-densities.
    The cloud is resampled systematically after every step.
    """

    def __init__(self, init_sampler: Callable, transition: Callable, loglik: Callable,
                 n_particles: int, seed=None):
        if n_particles < 1:
            raise ValueError("need at least one particle")
        self.rng = np.random.default_rng(seed)
        self.transition = transition
        self.loglik = loglik
        self.n = int(n_particles)
        x = np.asarray(init_sampler(self.rng, self.n), dtype=float)
        self.x = x.reshape(self.n, -1)
        self.k = 0
        self.log_likelihood = 0.0

    def step(self, y) -> PfEstimate:
        self.k += 1
        x = np.asarray(self.transition(self.rng, self.x, self.k), dtype=float).reshape(self.n, -1)
        ll = np.asarray(self.loglik(y, x, self.k), dtype=float).reshape(self.n)
        lw, total = normalize_log_weights(ll)
        if not np.isfinite(total):
            raise WeightDegeneracyError(self.k)
        inc = total - math.log(self.n)
        w = np.exp(lw)
        mean = w @ x
        var = w @ (x - mean) ** 2
        n_eff = ess(lw)
        self.x = x[resample_systematic(lw, self.rng)]
        self.log_likelihood += inc
        return PfEstimate(mean, var, n_eff, inc)

    def run(self, ys) -> dict[str, np.ndarray]:
        ests = [self.step(y) for y in ys]
        return {
            "mean": np.array([e.mean for e in ests]),
            "var": np.array([e.var for e in ests]),
            "ess": np.array([e.ess for e in ests]),
            "loglik_increment": np.array([e.loglik_increment for e in ests]),
        }


def bootstrap_pf(init_sampler, transition, loglik, n_particles: int, seed=None) -> BootstrapPF:
    return BootstrapPF(init_sampler, transition, loglik, n_particles, seed)


def lds_bootstrap_pf(model: LdsModel, x0: GaussianBelief, n_particles: int, seed=None,
                     meas_logpdf: Callable | None = None) -> BootstrapPF:
    """Bootstrap PF for an :class:`LdsModel` with Gaussian process noise.

    The measurement density is Gaussian from the model unless ``meas_logpdf``
    (a function of the residual array ``(n, ny)``) is given.
    """
    pn, mn = model.process_noise, model.measurement_noise
    if pn.family is not Family.GAUSSIAN:
        raise ValueError("lds_bootstrap_pf samples Gaussian process noise only")
    if meas_logpdf is None and mn.family is not Family.GAUSSIAN:
        raise ValueError("pass meas_logpdf for non-Gaussian measurement noise")
    L0 = np.linalg.cholesky(x0.cov)

    def init(rng, n):
        return x0.mean + rng.standard_normal((n, model.nx)) @ L0.T

    def transition(rng, x, k):
        w = pn.mu + rng.standard_normal((x.shape[0], pn.dim)) @ pn.chol.T
        return x @ model.A(k).T + w @ model.B(k).T

    if meas_logpdf is None:
        Lr = mn.chol
        logdet = 2 * np.sum(np.log(np.diag(Lr)))

        def meas_logpdf(r):
            z = np.linalg.solve(Lr, r.T)
            return -0.5 * (mn.dim * kalman.LOG_2PI + logdet + np.sum(z * z, axis=0))

    def loglik(y, x, k):
        r = np.atleast_1d(y) - x @ model.C(k).T
        return meas_logpdf(r)

    return BootstrapPF(init, transition, loglik, n_particles, seed)


@dataclass(frozen=True)
class ImmConfig:
    modes: tuple
    transition_matrix: np.ndarray
    initial_mode_probs: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.transition_matrix, dtype=float)
        mu = np.asarray(self.initial_mode_probs, dtype=float)
        M = len(self.modes)
        if M < 2:
            raise ValueError("IMM needs at least two modes")
        if P.shape != (M, M) or np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-12):
            raise ValueError("transition matrix must be row-stochastic and match the number of modes")
        if mu.shape != (M,) or np.any(mu < 0) or abs(mu.sum() - 1) > 1e-12:
            raise ValueError("initial mode probabilities must lie on the simplex")
        for m in self.modes:
            if (m.process_noise.family is not Family.GAUSSIAN
                    or m.measurement_noise.family is not Family.GAUSSIAN):
                raise ValueError("IMM modes must have Gaussian noises")
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "transition_matrix", P)
        object.__setattr__(self, "initial_mode_probs", mu)


@dataclass(frozen=True)
class ImmEstimate:
    mean: np.ndarray
    cov: np.ndarray
    mode_probs: np.ndarray
    loglik_increment: float


PROB_FLOOR = 1e-300


class ImmFilter:
    """Interacting multiple model filter (mixing, mode-matched KFs, combination)."""

    def __init__(self, config: ImmConfig, x0: GaussianBelief):
        self.config = config
        M = len(config.modes)
        self.means = np.repeat(x0.mean[None], M, axis=0)
        self.covs = np.repeat(x0.cov[None], M, axis=0)
        self.mode_probs = config.initial_mode_probs.copy()
        self.k = 0
        self.log_likelihood = 0.0

    def step(self, y) -> ImmEstimate:
        self.k += 1
        k = self.k
        Pi = self.config.transition_matrix
        mu = self.mode_probs
        c = mu @ Pi                                   # predicted mode probabilities
        c = np.maximum(c, PROB_FLOOR)
        mix = Pi * mu[:, None] / c[None, :]           # mix[i, j] = P(mode i at k-1 | mode j at k)
        m0 = mix.T @ self.means
        d = self.means[None, :, :] - m0[:, None, :]
        P0 = np.einsum("ij,ikl->jkl", mix, self.covs) + np.einsum("ij,jik,jil->jkl", mix, d, d)

        loglik = np.empty(len(c))
        for j, model in enumerate(self.config.modes):
            pn, mn = model.process_noise, model.measurement_noise
            pred = kalman.predict(GaussianBelief(m0[j], P0[j]), model.A(k), model.B(k), pn.mu, pn.Sigma)
            post, lik = kalman.update(pred, model.C(k), mn.mu, mn.Sigma, y)
            self.means[j], self.covs[j] = post.mean, post.cov
            loglik[j] = lik.loglik

        log_joint = loglik + np.log(c)
        inc = float(logsumexp(log_joint))
        mu = np.exp(log_joint - inc)
        mu = np.maximum(mu, PROB_FLOOR)
        self.mode_probs = mu / mu.sum()
        self.log_likelihood += inc

        mean = self.mode_probs @ self.means
        dm = self.means - mean
        cov = (np.einsum("j,jkl->kl", self.mode_probs, self.covs)
               + np.einsum("j,jk,jl->kl", self.mode_probs, dm, dm))
        return ImmEstimate(mean, kalman.symmetrize(cov), self.mode_probs.copy(), inc)

    def run(self, ys) -> dict[str, np.ndarray]:
        ests = [self.step(y) for y in ys]
        return {
            "mean": np.array([e.mean for e in ests]),
            "cov": np.array([e.cov for e in ests]),
            "mode_probs": np.array([e.mode_probs for e in ests]),
            "loglik_increment": np.array([e.loglik_increment for e in ests]),
        }


def imm_step(imm: ImmFilter, y) -> ImmEstimate:
    return imm.step(y)
