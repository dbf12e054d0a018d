"""Kalman recursions for the conditionally linear Gaussian model.

All functions broadcast over leading batch axes: a belief may hold a single
mean ``(n,)`` / covariance ``(n, n)`` or a bank of them, ``(N, n)`` /
``(N, n, n)``. Noise moments and observations broadcast the same way.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .distributions import HgmNoiseSpec

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _t(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def _mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (M @ v[..., None])[..., 0]


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim == 0:
            mean = mean[None]
        if cov.ndim < 2:
            cov = np.atleast_2d(cov)
        if cov.shape[-2:] != (mean.shape[-1], mean.shape[-1]):
            raise ValueError(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", symmetrize(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, idx) -> "GaussianBelief":
        return GaussianBelief(self.mean[idx], self.cov[idx])


@dataclass(frozen=True)
class PredictiveLikelihood:
    """Gaussian predictive density of the observation, ``N(mu_L, Sigma_L)``."""

    mu_L: np.ndarray
    Sigma_L: np.ndarray
    chol: np.ndarray
    # log-density at the observation passed to ``update``
    loglik: np.ndarray | None = None

    def logpdf_at(self, y) -> np.ndarray:
        r = np.asarray(y, dtype=float) - self.mu_L
        return _gauss_logpdf(r, self.chol)


def _gauss_logpdf(r: np.ndarray, L: np.ndarray) -> np.ndarray:
    # L lower-triangular factor of the covariance; r broadcasts over batch axes
    w = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (r.shape[-1] * LOG_2PI + logdet + np.sum(w * w, axis=-1))


def safe_cholesky(S: np.ndarray) -> np.ndarray:
    """Cholesky factor, retrying with a trace-scaled jitter on failure."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        n = S.shape[-1]
        jitter = 1e-10 * np.trace(S, axis1=-2, axis2=-1) / n
        logger.warning("innovation covariance not PD; adding jitter %s", np.max(jitter))
        try:
            return np.linalg.cholesky(S + jitter[..., None, None] * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular innovation covariance") from exc


def predict(belief: GaussianBelief, A, B, mu_w, Q) -> GaussianBelief:
    """Time update ``m <- A m + B mu_w``, ``P <- A P A' + B Q B'``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    mu_w = np.asarray(mu_w, dtype=float)
    Q = np.asarray(Q, dtype=float)
    _check_shapes(A.shape[-2:], (belief.dim, belief.dim), "A")
    if B.shape[-2] != belief.dim or B.shape[-1] != mu_w.shape[-1] or Q.shape[-2:] != (B.shape[-1],) * 2:
        raise ValueError(f"dimension mismatch: B {B.shape}, mu_w {mu_w.shape}, Q {Q.shape}")
    mean = _mv(A, belief.mean) + _mv(B, mu_w)
    cov = A @ belief.cov @ _t(A) + B @ Q @ _t(B)
    return GaussianBelief(mean, cov)


def update(pred: GaussianBelief, C, mu_e, R, y):
    """Measurement update.

    Returns the posterior belief and the predictive likelihood of ``y``. The
    innovation is ``y - C m - mu_e`` and the posterior covariance is
    ``P - K C P``.
    """
    C = np.asarray(C, dtype=float)
    mu_e = np.asarray(mu_e, dtype=float)
    R = np.asarray(R, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_shapes((C.shape[-1],), (pred.dim,), "C")
    if R.shape[-2:] != (C.shape[-2],) * 2 or y.shape[-1] != C.shape[-2]:
        raise ValueError(f"dimension mismatch: C {C.shape}, R {R.shape}, y {y.shape}")
    PCt = pred.cov @ _t(C)
    S = symmetrize(C @ PCt + R)
    L = safe_cholesky(S)
    mu_L = _mv(C, pred.mean) + mu_e
    innov = np.broadcast_to(y - mu_L, mu_L.shape)
    # one triangular pass whitens both C P and the innovation:
    # K' = L^{-T} L^{-1} C P and w = L^{-1} innov
    W = np.linalg.solve(L, np.concatenate([_t(PCt), innov[..., None]], axis=-1))
    w = W[..., -1]
    K = _t(np.linalg.solve(_t(L), W[..., :-1]))
    mean = pred.mean + _mv(K, innov)
    cov = pred.cov - K @ C @ pred.cov
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    loglik = -0.5 * (innov.shape[-1] * LOG_2PI + logdet + np.sum(w * w, axis=-1))
    return GaussianBelief(mean, cov), PredictiveLikelihood(mu_L, S, L, loglik)


def _check_shapes(got, want, name):
    if tuple(got) != tuple(want):
        raise ValueError(f"dimension mismatch for {name}: {got} vs {want}")


class Schedule:
    """Time-indexed matrix ``k -> M_k`` for ``k >= 1``.

    Built from a constant array, a callable, or a finite sequence whose first
    element is ``M_1``.
    """

    def __init__(self, source):
        if callable(source):
            self._fn = source
            self._seq = None
            self._const = None
            return
        self._fn = None
        arr = np.asarray(source, dtype=float)
        if arr.ndim == 3:
            self._seq = list(arr)
            self._const = None
        else:
            self._const = np.atleast_2d(arr)
            self._seq = None

    @property
    def horizon(self) -> int | None:
        return None if self._seq is None else len(self._seq)

    def __call__(self, k: int) -> np.ndarray:
        if k < 1:
            raise IndexError(f"schedules are defined for k >= 1, got {k}")
        if self._const is not None:
            return self._const
        if self._seq is not None:
            if k > len(self._seq):
                raise IndexError(f"step {k} outside schedule of length {len(self._seq)}")
            return self._seq[k - 1]
        return np.atleast_2d(np.asarray(self._fn(k), dtype=float))


@dataclass(frozen=True)
class LdsModel:
    """``x_k = A_k x_{k-1} + B_k w_k``, ``y_k = C_k x_k + e_k``."""

    A: Schedule
    B: Schedule
    C: Schedule
    process_noise: HgmNoiseSpec
    measurement_noise: HgmNoiseSpec

    def __post_init__(self):
        for name in ("A", "B", "C"):
            val = getattr(self, name)
            if not isinstance(val, Schedule):
                object.__setattr__(self, name, Schedule(val))
        A1, B1, C1 = self.A(1), self.B(1), self.C(1)
        nx = A1.shape[0]
        if A1.shape != (nx, nx):
            raise ValueError(f"A must be square, got {A1.shape}")
        if B1.shape != (nx, self.process_noise.dim):
            raise ValueError(f"B has shape {B1.shape}, expected ({nx}, {self.process_noise.dim})")
        if C1.shape != (self.measurement_noise.dim, nx):
            raise ValueError(f"C has shape {C1.shape}, expected ({self.measurement_noise.dim}, {nx})")

    @property
    def nx(self) -> int:
        return self.A(1).shape[0]

    @property
    def ny(self) -> int:
        return self.C(1).shape[0]

    def with_noises(self, process: HgmNoiseSpec, measurement: HgmNoiseSpec) -> "LdsModel":
        return LdsModel(self.A, self.B, self.C, process, measurement)


def transition_product(model: LdsModel, k: int, l: int) -> np.ndarray:
    """``Phi_{k,l} = A_{k-1} A_{k-2} ... A_l`` for ``k > l``; identity when ``k == l``."""
    Phi = np.eye(model.nx)
    for j in range(l, k):
        Phi = model.A(j) @ Phi
    return Phi


def predict_p_step(belief: GaussianBelief, model: LdsModel, noise_means: Sequence,
                   noise_covs: Sequence, k: int, p: int) -> GaussianBelief:
    """Predict ``p`` steps ahead from the filtered belief at step ``k``.

    ``noise_means[j - 1]`` and ``noise_covs[j - 1]`` are the process-noise
    moments at step ``k + j``. Uses the closed-form transition-product sums
    rather than repeated one-step predictions.
    """
    if p < 1:
        raise ValueError(f"horizon must be >= 1, got {p}")
    if len(noise_means) < p or len(noise_covs) < p:
        raise ValueError("need process-noise moments for every step of the horizon")
    try:
        Phi0 = transition_product(model, k + 1 + p, k + 1)
        mean = _mv(Phi0, belief.mean)
        cov = Phi0 @ belief.cov @ Phi0.T
        for j in range(1, p + 1):
            Phi = transition_product(model, k + 1 + p, k + 1 + j)
            G = Phi @ model.B(k + j)
            mean = mean + _mv(G, np.asarray(noise_means[j - 1], dtype=float))
            cov = cov + G @ np.asarray(noise_covs[j - 1], dtype=float) @ G.T
    except IndexError as exc:
        raise ValueError(f"horizon {p} from step {k} leaves the model schedule") from exc
    return GaussianBelief(mean, cov)


def gaussian_logpdf(y, mean, cov) -> float:
    r = np.asarray(y, dtype=float) - np.asarray(mean, dtype=float)
    return float(_gauss_logpdf(r, safe_cholesky(np.asarray(cov, dtype=float))))


class KalmanFilter:
    """Plain Kalman filter for a Gaussian-noise :class:`LdsModel`."""

    def __init__(self, model: LdsModel, x0: GaussianBelief):
        pn, mn = model.process_noise, model.measurement_noise
        if pn.family.value != "gaussian" or mn.family.value != "gaussian":
            raise ValueError("KalmanFilter needs Gaussian process and measurement noise")
        self.model = model
        self.belief = x0
        self.k = 0
        self.loglik = 0.0

    def step(self, y) -> tuple[GaussianBelief, float]:
        self.k += 1
        m, pn, mn = self.model, self.model.process_noise, self.model.measurement_noise
        pred = predict(self.belief, m.A(self.k), m.B(self.k), pn.mu, pn.Sigma)
        self.belief, lik = update(pred, m.C(self.k), mn.mu, mn.Sigma, y)
        inc = float(lik.loglik)
        self.loglik += inc
        return self.belief, inc

    def run(self, ys) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Filter a sequence; returns means, covariances and per-step log-likelihoods."""
        means, covs, lls = [], [], []
        for y in ys:
            b, inc = self.step(y)
            means.append(b.mean)
            covs.append(b.cov)
            lls.append(inc)
        nx = self.model.nx
        return (np.array(means).reshape(-1, nx), np.array(covs).reshape(-1, nx, nx), np.array(lls))
