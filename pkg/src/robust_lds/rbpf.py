"""Rao-Blackwellized particle filter over the noise mixing values.

Particles carry the current process and measurement mixing values together
with a Kalman belief conditional on their mixing path. Proposals use the
mixing kernels (bootstrap), weights use the Kalman predictive likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kalman
from .distributions import HgmNoiseSpec, conditional_gaussian
from .kalman import GaussianBelief, LdsModel
from .mixing import DEFAULT_RHO, MixingKernel, make_kernel

RESAMPLE_MODES = ("always", "ess")


class WeightDegeneracyError(RuntimeError):
    """All particle weights underflowed at ``step``."""

    def __init__(self, step: int):
        super().__init__(f"all particle weights are zero at step {step}")
        self.step = step


@dataclass(frozen=True)
class Particle:
    lambda_w: float
    lambda_e: float
    belief: GaussianBelief
    log_weight: float


@dataclass(frozen=True)
class FilterEstimate:
    mean: np.ndarray
    cov: np.ndarray
    ess: float
    loglik_increment: float
    # predictive mixture weighted by the updated (posterior) weights
    loglik_increment_posterior: float = float("nan")
    resampled: bool = False


def logsumexp(a) -> float:
    """``log(sum(exp(a)))`` of a 1-D array, stable for large magnitudes."""
    a = np.asarray(a, dtype=float)
    m = a.max()
    if not np.isfinite(m):
        return float(m) if m > 0 or np.isnan(m) else -math.inf
    return float(m + math.log(np.exp(a - m).sum()))


def normalize_log_weights(log_weights) -> tuple[np.ndarray, float]:
    """Return normalized log-weights and the log of the original total."""
    lw = np.asarray(log_weights, dtype=float)
    total = logsumexp(lw)
    if not np.isfinite(total):
        return np.full_like(lw, np.nan), total
    return lw - total, float(total)


def ess(log_weights) -> float:
    """Effective sample size ``1 / sum(w^2)`` of normalized log-weights."""
    w = np.exp(np.asarray(log_weights, dtype=float))
    return float(1.0 / np.sum(w * w))


def resample_systematic(log_weights, rng: np.random.Generator | None = None,
                        u: float | None = None) -> np.ndarray:
    """Systematic resampling with a single uniform offset ``u`` in ``[0, 1)``."""
    w = np.exp(np.asarray(log_weights, dtype=float))
    n = w.size
    if u is None:
        u = rng.random()
    positions = (u + np.arange(n)) / n
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def mixture_moments(log_weights, means, covs) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of a weighted Gaussian mixture.

    Moments are accumulated relative to the first component, so a bank of
    identical particles returns that particle's belief exactly.
    """
    w = np.exp(np.asarray(log_weights, dtype=float))
    w = w / w.sum()
    mean = means[0] + w @ (means - means[0])
    d = means - mean
    cov = covs[0] + np.einsum("i,ijk->jk", w, covs - covs[0]) + np.einsum("i,ij,ik->jk", w, d, d)
    return mean, kalman.symmetrize(cov)


@dataclass
class RbpfState:
    model: LdsModel
    kernel_w: MixingKernel
    kernel_e: MixingKernel
    means: np.ndarray
    covs: np.ndarray
    lambda_w: np.ndarray
    lambda_e: np.ndarray
    log_weights: np.ndarray
    ess_threshold: float = 0.5
    resample: str = "always"
    seed: int | None = None
    step_index: int = 0
    cumulative_loglik: float = 0.0
    cumulative_loglik_posterior: float = 0.0
    last: FilterEstimate | None = field(default=None, repr=False)

    @property
    def n_particles(self) -> int:
        return self.log_weights.size

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(float(self.lambda_w[i]), float(self.lambda_e[i]),
                     GaussianBelief(self.means[i], self.covs[i]), float(self.log_weights[i]))
            for i in range(self.n_particles)
        ]

    def step_rng(self, k: int) -> np.random.Generator:
        """Substream keyed by ``(seed, step)``; particle draws are taken in index order."""
        ss = np.random.SeedSequence(entropy=self.seed if self.seed is not None else 0, spawn_key=(k,))
        return np.random.Generator(np.random.Philox(ss))


def init(model: LdsModel, x0: GaussianBelief, n_particles: int,
         kernels: tuple[MixingKernel, MixingKernel] | None = None,
         ess_threshold: float = 0.5, resample: str = "always", seed: int | None = None,
         rho_w: float = DEFAULT_RHO, rho_e: float = DEFAULT_RHO) -> RbpfState:
    """Create a bank of ``n_particles`` Kalman filters sharing the prior ``x0``.

    Without explicit ``kernels`` the kernels are built from the model's noise
    specs with autocorrelations ``rho_w`` and ``rho_e``.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if not 0.0 < ess_threshold <= 1.0:
        raise ValueError(f"ess_threshold must lie in (0, 1], got {ess_threshold}")
    if resample not in RESAMPLE_MODES:
        raise ValueError(f"resample must be one of {RESAMPLE_MODES}, got {resample!r}")
    if kernels is None:
        kernels = (make_kernel(model.process_noise, rho_w), make_kernel(model.measurement_noise, rho_e))
    kw, ke = kernels
    _check_pairing(model.process_noise, kw, "process")
    _check_pairing(model.measurement_noise, ke, "measurement")
    if x0.mean.shape != (model.nx,):
        raise ValueError(f"x0 has dimension {x0.mean.shape}, model state is {model.nx}")
    n = int(n_particles)
    return RbpfState(
        model=model, kernel_w=kw, kernel_e=ke,
        means=np.repeat(x0.mean[None], n, axis=0),
        covs=np.repeat(x0.cov[None], n, axis=0),
        lambda_w=np.ones(n), lambda_e=np.ones(n),
        log_weights=np.full(n, -math.log(n)),
        ess_threshold=ess_threshold, resample=resample, seed=seed,
    )


def _check_pairing(spec: HgmNoiseSpec, kernel: MixingKernel, channel: str) -> None:
    mg = spec.mixing_marginal
    if mg is None:
        if not kernel.degenerate:
            raise ValueError(f"{channel} noise is Gaussian but its kernel is not degenerate")
    elif kernel.degenerate or kernel.marginal != mg:
        raise ValueError(f"{channel} kernel invariant law does not match the noise mixing density")


def _propagate_lambda(kernel: MixingKernel, lam: np.ndarray, k: int, rng) -> np.ndarray:
    if k == 1:
        return np.asarray(kernel.sample_invariant(rng, lam.size), dtype=float).reshape(lam.shape)
    return kernel.step(lam, rng)


def step(state: RbpfState, y, rng: np.random.Generator | None = None) -> FilterEstimate:
    """Advance the filter by one observation and return the filtered estimate."""
    model = state.model
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (model.ny,):
        raise ValueError(f"observation has shape {y.shape}, expected ({model.ny},)")
    k = state.step_index + 1
    if rng is None:
        rng = state.step_rng(k)

    lam_w = _propagate_lambda(state.kernel_w, state.lambda_w, k, rng)
    lam_e = _propagate_lambda(state.kernel_e, state.lambda_e, k, rng)
    mu_w, Q = conditional_gaussian(model.process_noise, lam_w)
    mu_e, R = conditional_gaussian(model.measurement_noise, lam_e)

    prior = GaussianBelief(state.means, state.covs)
    pred = kalman.predict(prior, model.A(k), model.B(k), mu_w, Q)
    post, lik = kalman.update(pred, model.C(k), mu_e, R, y)
    ll = lik.loglik

    prior_lw = state.log_weights
    loglik_inc = float(logsumexp(prior_lw + ll))
    lw, _ = normalize_log_weights(prior_lw + ll)
    if not np.isfinite(loglik_inc) or np.any(np.isnan(lw)):
        raise WeightDegeneracyError(k)
    loglik_post = float(logsumexp(lw + ll))

    mean, cov = mixture_moments(lw, post.mean, post.cov)
    n_eff = ess(lw)

    means, covs = post.mean, post.cov
    resampled = state.resample == "always" or n_eff < state.ess_threshold * state.n_particles
    if resampled:
        idx = resample_systematic(lw, rng)
        means, covs = means[idx], covs[idx]
        lam_w, lam_e = lam_w[idx], lam_e[idx]
        lw = np.full(state.n_particles, -math.log(state.n_particles))

    state.means, state.covs = means, covs
    state.lambda_w, state.lambda_e = lam_w, lam_e
    state.log_weights = lw
    state.step_index = k
    state.cumulative_loglik += loglik_inc
    state.cumulative_loglik_posterior += loglik_post
    state.last = FilterEstimate(mean, cov, n_eff, loglik_inc, loglik_post, resampled)
    return state.last


def estimate(state: RbpfState) -> FilterEstimate:
    """Mixture mean and covariance of the current particle bank."""
    mean, cov = mixture_moments(state.log_weights, state.means, state.covs)
    inc = state.last.loglik_increment if state.last is not None else float("nan")
    post = state.last.loglik_increment_posterior if state.last is not None else float("nan")
    return FilterEstimate(mean, cov, ess(state.log_weights), inc, post)


def log_likelihood(state: RbpfState) -> float:
    """Accumulated ``log p(y_1:k)`` estimate (prior-weight form)."""
    if state.step_index == 0:
        raise ValueError("no observation has been processed yet")
    return state.cumulative_loglik


def predict_ahead(state: RbpfState, p: int, rng: np.random.Generator | None = None,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Mixture moments of ``p(x_{k+p} | y_1:k)``.

    Future process-noise mixing values are drawn from the kernel for every
    particle, then each Kalman belief is pushed through the closed-form
    ``p``-step prediction.
    """
    if rng is None:
        rng = np.random.default_rng([state.seed or 0, state.step_index, p])
    k = state.step_index
    n = state.n_particles
    lam = state.lambda_w
    lams = []
    for j in range(1, p + 1):
        lam = _propagate_lambda(state.kernel_w, lam, k + j, rng)
        lams.append(lam)
    means = np.empty_like(state.means)
    covs = np.empty_like(state.covs)
    for i in range(n):
        mus, Qs = zip(*(conditional_gaussian(state.model.process_noise, lams[j][i]) for j in range(p)))
        b = kalman.predict_p_step(GaussianBelief(state.means[i], state.covs[i]), state.model,
                                  mus, Qs, k, p)
        means[i], covs[i] = b.mean, b.cov
    return mixture_moments(state.log_weights, means, covs)


class RBPF:
    """Object wrapper around :func:`init` / :func:`step` for batch runs."""

    def __init__(self, model: LdsModel, x0: GaussianBelief, n_particles: int, **kwargs):
        self.state = init(model, x0, n_particles, **kwargs)

    def step(self, y, rng=None) -> FilterEstimate:
        return step(self.state, y, rng)

    def run(self, ys) -> dict[str, np.ndarray]:
        """Filter every observation; returns stacked means, covs, ESS and increments."""
        ests = [self.step(y) for y in ys]
        nx = self.state.model.nx
        return {
            "mean": np.array([e.mean for e in ests]).reshape(-1, nx),
            "cov": np.array([e.cov for e in ests]).reshape(-1, nx, nx),
            "ess": np.array([e.ess for e in ests]),
            "loglik_increment": np.array([e.loglik_increment for e in ests]),
            "loglik_increment_posterior": np.array([e.loglik_increment_posterior for e in ests]),
        }

    @property
    def log_likelihood(self) -> float:
        return log_likelihood(self.state)
