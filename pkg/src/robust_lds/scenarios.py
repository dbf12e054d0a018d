"""Synthetic data sets and error metrics for the filtering experiments."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import distributions as dist
from .kalman import GaussianBelief, LdsModel

AR2_COEFFS = (1.51, -0.55)


def _psd_factor(c: np.ndarray) -> np.ndarray:
    """``L`` with ``L L^T = c``; semidefinite (e.g. zero) covariances are allowed."""
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(c)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class NoiseMixtureSpec:
    """Finite Gaussian mixture ``sum_i w_i N(mean_i, cov_i)``.

    ``schedule`` optionally switches to another mixture from a given step
    on: entries are ``(first_step, NoiseMixtureSpec)`` with 1-based steps.
    """

    components: tuple
    schedule: tuple = ()

    def __post_init__(self):
        comps = []
        for w, m, c in self.components:
            c = np.atleast_2d(np.asarray(c, dtype=float))
            m = np.broadcast_to(np.asarray(m, dtype=float), (c.shape[0],)).copy()
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12 * max(1.0, np.abs(c).max()):
                raise ValueError("mixture component covariance must be symmetric positive semidefinite")
            comps.append((float(w), m, c))
        if not comps:
            raise ValueError("a noise mixture needs at least one component")
        total = sum(w for w, _, _ in comps)
        if abs(total - 1.0) > 1e-9 or any(w < 0 for w, _, _ in comps):
            raise ValueError(f"mixture weights must be a probability vector, sum={total}")
        dims = {m.size for _, m, _ in comps}
        if len(dims) != 1:
            raise ValueError("mixture components disagree on dimension")
        object.__setattr__(self, "components", tuple(comps))
        object.__setattr__(self, "_factors", tuple(_psd_factor(c) for _, _, c in comps))
        sched = tuple(sorted(((int(s), spec) for s, spec in self.schedule), key=lambda t: t[0]))
        object.__setattr__(self, "schedule", sched)

    @property
    def dim(self) -> int:
        return self.components[0][1].size

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _, _ in self.components])

    def at(self, k: int) -> "NoiseMixtureSpec":
        active = self
        for start, spec in self.schedule:
            if k >= start:
                active = spec
        return active

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` consecutive noises for steps ``1..n``; returns values and component labels."""
        out = np.empty((n, self.dim))
        labels = np.empty(n, dtype=int)
        for k in range(1, n + 1):
            spec = self.at(k)
            j = int(rng.choice(len(spec.components), p=spec.weights))
            _, m, _ = spec.components[j]
            out[k - 1] = m + spec._factors[j] @ rng.standard_normal(spec.dim)
            labels[k - 1] = j
        return out, labels


def gaussian_noise(var, dim: int = 1) -> NoiseMixtureSpec:
    return NoiseMixtureSpec(((1.0, np.zeros(dim), np.eye(dim) * var),))


def two_component(w1: float, var1, var2, dim: int = 1) -> NoiseMixtureSpec:
    return NoiseMixtureSpec(((w1, np.zeros(dim), np.eye(dim) * var1),
                             (1 - w1, np.zeros(dim), np.eye(dim) * var2)))


def regime_switch(first: NoiseMixtureSpec, second: NoiseMixtureSpec, switch_step: int) -> NoiseMixtureSpec:
    """``first`` for steps ``< switch_step``, ``second`` afterwards."""
    return NoiseMixtureSpec(first.components, ((switch_step, second),))


# Stochastic volatility ------------------------------------------------------

@dataclass(frozen=True)
class SvData:
    h0: float
    h: np.ndarray
    y: np.ndarray

    @property
    def log_y2(self) -> np.ndarray:
        return np.log(self.y ** 2)


def simulate_sv(gamma0: float, gamma1: float, sigma_n: float, T: int, seed) -> SvData:
    """Exact simulation of ``h_{k+1} = g0 + g1 h_k + eta``, ``y_k = eps_k exp(h_k / 2)``.

    ``h0`` is drawn from the zero-mean stationary law; ``h`` and ``y`` hold
    steps ``1..T``.
    """
    if not abs(gamma1) < 1:
        raise ValueError(f"|gamma1| must be < 1, got {gamma1}")
    rng = np.random.default_rng(seed)
    h0 = rng.normal(0.0, sigma_n / math.sqrt(1 - gamma1 ** 2))
    eta = rng.normal(0.0, 1.0, T) * sigma_n
    eps = rng.standard_normal(T)
    h = np.empty(T)
    prev = h0
    for k in range(T):
        prev = gamma0 + gamma1 * prev + eta[k]
        h[k] = prev
    return SvData(h0, h, eps * np.exp(h / 2))


def sv_noise_logpdf(e):
    """Log-density of ``log(eps^2)`` for standard normal ``eps``."""
    e = np.asarray(e, dtype=float)
    return -0.5 * math.log(2 * math.pi) - 0.5 * (np.exp(e) - e)


def sv_model(gamma0: float, gamma1: float, sigma_n: float,
             measurement_noise: dist.HgmNoiseSpec) -> LdsModel:
    """Linear form with state ``h`` and observation ``log y^2``."""
    return LdsModel([[gamma1]], [[1.0]], [[1.0]],
                    dist.gaussian([gamma0], [[sigma_n ** 2]]), measurement_noise)


def sv_prior(gamma1: float, sigma_n: float) -> GaussianBelief:
    return GaussianBelief([0.0], [[sigma_n ** 2 / (1 - gamma1 ** 2)]])


def sv_paper_noise() -> dist.HgmNoiseSpec:
    """GH skew-t stand-in for the log chi-square observation noise."""
    return dist.gh_skew_t(1.75, -2.3, 1.0, 5.8)


# AR(2) time series ----------------------------------------------------------

@dataclass(frozen=True)
class Ar2Data:
    s: np.ndarray
    y: np.ndarray
    w: np.ndarray
    e: np.ndarray
    s0: float = 0.0

    @property
    def states(self) -> np.ndarray:
        """Filter state ``(s_k, s_{k-1})`` per step."""
        prev = np.concatenate([[self.s0], self.s])[:len(self.s)]
        return np.column_stack([self.s, prev])


def ar2_matrices(coeffs: Sequence[float] = AR2_COEFFS):
    a1, a2 = coeffs
    return np.array([[a1, a2], [1.0, 0.0]]), np.array([[1.0], [0.0]]), np.array([[1.0, 0.0]])


def ar2_is_stable(coeffs: Sequence[float]) -> bool:
    A, _, _ = ar2_matrices(coeffs)
    return bool(np.max(np.abs(np.linalg.eigvals(A))) < 1)


def simulate_ar2(T: int, process: NoiseMixtureSpec, meas: NoiseMixtureSpec, seed,
                 coeffs: Sequence[float] = AR2_COEFFS, s_init=(0.0, 0.0),
                 force: bool = False) -> Ar2Data:
    """``s_k = a1 s_{k-1} + a2 s_{k-2} + w_k``, ``y_k = s_k + e_k`` for ``k = 1..T``.

    ``s_init`` is ``(s_0, s_{-1})``.
    """
    if not force and not ar2_is_stable(coeffs):
        raise ValueError(f"AR(2) coefficients {tuple(coeffs)} are not stable; pass force=True")
    rng = np.random.default_rng(seed)
    w, _ = process.sample(rng, T)
    e, _ = meas.sample(rng, T)
    a1, a2 = coeffs
    s = np.empty(T)
    s1, s2 = s_init
    for k in range(T):
        s1, s2 = a1 * s1 + a2 * s2 + w[k, 0], s1
        s[k] = s1
    return Ar2Data(s, s + e[:, 0], w[:, 0], e[:, 0], float(s_init[0]))


def ar2_model(process_noise: dist.HgmNoiseSpec, measurement_noise: dist.HgmNoiseSpec,
              coeffs: Sequence[float] = AR2_COEFFS) -> LdsModel:
    A, B, C = ar2_matrices(coeffs)
    return LdsModel(A, B, C, process_noise, measurement_noise)


def ar2_sporadic() -> NoiseMixtureSpec:
    return two_component(0.95, 10.0, 100.0)


def ar2_persistent(T: int = 200) -> NoiseMixtureSpec:
    return regime_switch(gaussian_noise(10.0), gaussian_noise(100.0), T // 2 + 1)


# Maneuvering target --------------------------------------------------------

@dataclass(frozen=True)
class Linear:
    duration: int


@dataclass(frozen=True)
class CoordinatedTurn:
    duration: int
    turn_rate: float  # rad/s, negative turns clockwise


@dataclass(frozen=True)
class TrackSpec:
    segments: tuple = (Linear(30), CoordinatedTurn(40, -math.pi / 40), Linear(30))
    T: float = 1.0
    meas_noise: NoiseMixtureSpec = field(default_factory=lambda: gaussian_noise(80.0 ** 2, 2))
    initial_position: tuple = (0.0, 0.0)
    initial_velocity: tuple = (0.0, 60.0)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("sampling period must be positive")
        for seg in self.segments:
            if seg.duration < 1:
                raise ValueError("segment durations must be at least one step")
        if self.meas_noise.dim != 2:
            raise ValueError("track measurement noise must be two-dimensional")

    @property
    def n_steps(self) -> int:
        return sum(s.duration for s in self.segments)


def contaminated_track_noise() -> NoiseMixtureSpec:
    return two_component(0.8, 80.0 ** 2, 300.0 ** 2, dim=2)


def cv_matrices(T: float = 1.0):
    I2 = np.eye(2)
    Z = np.zeros((2, 2))
    A = np.block([[I2, T * I2], [Z, I2]])
    B = np.vstack([T ** 2 / 2 * I2, T * I2])
    C = np.hstack([I2, Z])
    return A, B, C


def cv_model(process_noise: dist.HgmNoiseSpec, measurement_noise: dist.HgmNoiseSpec,
             T: float = 1.0) -> LdsModel:
    A, B, C = cv_matrices(T)
    return LdsModel(A, B, C, process_noise, measurement_noise)


def simulate_track(spec: TrackSpec, seed) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free truth ``(n, 4)`` (position, velocity) and noisy positions ``(n, 2)``.

    Row ``k - 1`` holds step ``k``; the initial state at step 0 is the spec's
    starting point and is not included.
    """
    rng = np.random.default_rng(seed)
    p = np.asarray(spec.initial_position, dtype=float)
    v = np.asarray(spec.initial_velocity, dtype=float)
    T = spec.T
    states = []
    for seg in spec.segments:
        for _ in range(seg.duration):
            if isinstance(seg, CoordinatedTurn) and seg.turn_rate != 0.0:
                w = seg.turn_rate
                s, c = math.sin(w * T), math.cos(w * T)
                p = p + np.array([s * v[0] - (1 - c) * v[1], (1 - c) * v[0] + s * v[1]]) / w
                v = np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])
            else:
                p = p + T * v
            states.append(np.concatenate([p, v]))
    x = np.array(states).reshape(-1, 4)
    e, _ = spec.meas_noise.sample(rng, len(x))
    return x, x[:, :2] + e


def track_prior(spec: TrackSpec) -> GaussianBelief:
    """Diffuse prior centred on the true start."""
    mean = np.concatenate([spec.initial_position, spec.initial_velocity])
    return GaussianBelief(mean, np.diag([80.0 ** 2, 80.0 ** 2, 50.0 ** 2, 50.0 ** 2]))


# Metrics -------------------------------------------------------------------

def metrics(truth, estimates) -> tuple[float, float]:
    """Root mean squared Euclidean error and the largest absolute component error."""
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(estimates, dtype=float)
    if truth.shape != est.shape:
        raise ValueError(f"length mismatch: truth {truth.shape} vs estimates {est.shape}")
    if truth.size == 0:
        return float("nan"), float("nan")
    err = (est - truth).reshape(len(truth), -1)
    rmse = math.sqrt(float(np.mean(np.sum(err ** 2, axis=1))))
    return rmse, float(np.max(np.abs(err)))


def aggregate(per_run: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Monte Carlo summary: mean RMSE and the max of the max-errors."""
    if not per_run:
        return float("nan"), float("nan")
    rm = np.array([r for r, _ in per_run])
    mx = np.array([m for _, m in per_run])
    return float(np.mean(rm)), float(np.max(mx))
