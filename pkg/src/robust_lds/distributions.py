"""Hierarchical Gaussian noise families.

Every family is Gaussian conditional on a positive mixing value ``lam``:

* scale mixtures (Student's t, Pearson VII, slash, variance gamma) use
  ``N(mu, Sigma / lam)``;
* normal variance-mean mixtures (GH skew t, GH variance gamma) use
  ``N(mu + beta * lam, lam * Sigma)``;
* the Gaussian family is the degenerate mixture ``N(mu, Sigma)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special, stats


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "student_t"
    PEARSON_VII = "pearson_vii"
    SLASH = "slash"
    VARIANCE_GAMMA = "variance_gamma"
    GH_SKEW_T = "gh_skew_t"
    GH_VARIANCE_GAMMA = "gh_variance_gamma"


SMN_FAMILIES = frozenset(
    {Family.STUDENT_T, Family.PEARSON_VII, Family.SLASH, Family.VARIANCE_GAMMA}
)
NVMM_FAMILIES = frozenset({Family.GH_SKEW_T, Family.GH_VARIANCE_GAMMA})


class QuadratureError(RuntimeError):
    """Raised when the density oracle cannot reach its error tolerance."""


@dataclass(frozen=True)
class MixingMarginal:
    """Invariant law of the mixing value.

    ``kind`` is one of ``"gamma"`` (shape ``a``, rate ``b``), ``"inverse_gamma"``
    (shape ``a``, scale ``b``) or ``"beta"`` (``Be(a, b)``).
    """

    kind: str
    a: float
    b: float

    def frozen(self):
        if self.kind == "gamma":
            return stats.gamma(self.a, scale=1.0 / self.b)
        if self.kind == "inverse_gamma":
            return stats.invgamma(self.a, scale=self.b)
        if self.kind == "beta":
            return stats.beta(self.a, self.b)
        raise ValueError(f"unknown marginal {self.kind!r}")

    def mean(self) -> float:
        return float(self.frozen().mean())

    def var(self) -> float:
        return float(self.frozen().var())

    def log_density_fn(self):
        """Scalar log-density as a plain closure (fast inside quadrature)."""
        a, b = float(self.a), float(self.b)
        if self.kind == "gamma":
            const = a * math.log(b) - special.gammaln(a)
            return lambda lam: const + (a - 1) * math.log(lam) - b * lam if lam > 0 else -math.inf
        if self.kind == "inverse_gamma":
            const = a * math.log(b) - special.gammaln(a)
            return lambda lam: const - (a + 1) * math.log(lam) - b / lam if lam > 0 else -math.inf
        if self.kind == "beta":
            const = -special.betaln(a, b)

            def logpdf(lam):
                if not 0 < lam < 1:
                    return -math.inf
                return const + (a - 1) * math.log(lam) + (b - 1) * math.log1p(-lam)
            return logpdf
        raise ValueError(f"unknown marginal {self.kind!r}")

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "gamma":
            return rng.gamma(self.a, 1.0 / self.b, size=size)
        if self.kind == "inverse_gamma":
            return self.b / rng.gamma(self.a, 1.0, size=size)
        if self.kind == "beta":
            return rng.beta(self.a, self.b, size=size)
        raise ValueError(f"unknown marginal {self.kind!r}")


@dataclass(frozen=True, eq=False)
class HgmNoiseSpec:
    """Parameters of one hierarchical Gaussian noise channel.

    ``mu``, ``beta`` and ``Sigma`` are promoted to a vector / matrix of the
    same dimension. ``nu`` is required by all non-Gaussian families, ``delta``
    only by Pearson VII. ``beta`` must be zero for symmetric families.
    """

    family: Family
    mu: np.ndarray
    Sigma: np.ndarray
    nu: float | None = None
    delta: float | None = None
    beta: np.ndarray | None = None
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        family = Family(self.family)
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        dim = Sigma.shape[0]
        if Sigma.shape != (dim, dim):
            raise ValueError(f"Sigma must be square, got shape {Sigma.shape}")
        if not np.allclose(Sigma, Sigma.T, rtol=1e-12, atol=0.0):
            raise ValueError("Sigma must be symmetric")
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (dim,)).copy()
        beta = np.zeros(dim) if self.beta is None else (
            np.broadcast_to(np.asarray(self.beta, dtype=float), (dim,)).copy())
        try:
            chol = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Sigma must be positive definite") from exc

        nu, delta = self.nu, self.delta
        if family is not Family.GAUSSIAN:
            if nu is None or not nu > 0:
                raise ValueError(f"{family.value} requires nu > 0, got {nu}")
            nu = float(nu)
        if family is Family.PEARSON_VII:
            if delta is None or not delta > 0:
                raise ValueError(f"pearson_vii requires delta > 0, got {delta}")
            delta = float(delta)
        if family not in NVMM_FAMILIES and np.any(beta != 0):
            raise ValueError(f"beta must be zero for symmetric family {family.value}")

        object.__setattr__(self, "family", family)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.Sigma.shape[0]

    @property
    def is_nvmm(self) -> bool:
        return self.family in NVMM_FAMILIES

    @property
    def mixing_marginal(self) -> MixingMarginal | None:
        """Invariant law of the mixing value, ``None`` for the Gaussian family."""
        f, nu = self.family, self.nu
        if f is Family.GAUSSIAN:
            return None
        if f in (Family.STUDENT_T, Family.GH_VARIANCE_GAMMA):
            return MixingMarginal("gamma", nu / 2, nu / 2)
        if f is Family.PEARSON_VII:
            return MixingMarginal("gamma", nu / 2, self.delta / 2)
        if f is Family.SLASH:
            return MixingMarginal("beta", nu, 1.0)
        return MixingMarginal("inverse_gamma", nu / 2, nu / 2)

    def to_dict(self) -> dict:
        d = {"family": self.family.value, "mu": self.mu.tolist(), "Sigma": self.Sigma.tolist()}
        if self.nu is not None:
            d["nu"] = self.nu
        if self.delta is not None:
            d["delta"] = self.delta
        if self.is_nvmm:
            d["beta"] = self.beta.tolist()
        return d


def gaussian(mu, Sigma) -> HgmNoiseSpec:
    return HgmNoiseSpec(Family.GAUSSIAN, mu, Sigma)


def student_t(mu, Sigma, nu) -> HgmNoiseSpec:
    return HgmNoiseSpec(Family.STUDENT_T, mu, Sigma, nu=nu)


def laplace(mu, Sigma) -> HgmNoiseSpec:
    """Laplace law with covariance ``Sigma``: the variance gamma family at nu=2."""
    return HgmNoiseSpec(Family.VARIANCE_GAMMA, mu, Sigma, nu=2.0)


def gh_skew_t(mu, beta, Sigma, nu) -> HgmNoiseSpec:
    return HgmNoiseSpec(Family.GH_SKEW_T, mu, Sigma, nu=nu, beta=beta)


def _check_lambda(spec: HgmNoiseSpec, lam: np.ndarray) -> None:
    if np.any(~(lam > 0)):
        raise ValueError("mixing value must be positive")
    if spec.family is Family.SLASH and np.any(lam >= 1):
        raise ValueError("slash mixing value must lie in (0, 1)")


def conditional_gaussian(spec: HgmNoiseSpec, lam):
    """Mean and covariance of the noise given the mixing value.

    ``lam`` may be a scalar or an array of shape ``(N,)``; the outputs then
    gain a leading axis: means ``(N, d)`` and covariances ``(N, d, d)``.
    """
    lam_arr = np.asarray(lam, dtype=float)
    if spec.family is Family.GAUSSIAN:
        shape = lam_arr.shape
        mean = np.broadcast_to(spec.mu, shape + (spec.dim,)).copy()
        cov = np.broadcast_to(spec.Sigma, shape + (spec.dim, spec.dim)).copy()
        return mean, cov
    _check_lambda(spec, lam_arr)
    l_vec = lam_arr[..., None]
    l_mat = lam_arr[..., None, None]
    if spec.is_nvmm:
        return spec.mu + spec.beta * l_vec, spec.Sigma * l_mat
    return np.broadcast_to(spec.mu, lam_arr.shape + (spec.dim,)).copy(), spec.Sigma / l_mat


def sample_invariant(spec: HgmNoiseSpec, rng: np.random.Generator, size=None):
    """Draw mixing values from the family's mixing density."""
    marginal = spec.mixing_marginal
    if marginal is None:
        raise ValueError("the Gaussian family has no mixing variable")
    return marginal.sample(rng, size)


def sample_noise(spec: HgmNoiseSpec, rng: np.random.Generator, size=None):
    """Hierarchical draw: mixing value first, then the conditional Gaussian.

    Returns shape ``(d,)`` for ``size=None`` and ``(size, d)`` otherwise.
    """
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, spec.dim)) @ spec.chol.T
    if spec.family is Family.GAUSSIAN:
        x = spec.mu + z
    else:
        lam = sample_invariant(spec, rng, n)[:, None]
        if spec.is_nvmm:
            x = spec.mu + spec.beta * lam + np.sqrt(lam) * z
        else:
            x = spec.mu + z / np.sqrt(lam)
    return x[0] if size is None else x


def marginal_logpdf_oracle(spec: HgmNoiseSpec, x: float, tol: float = 1e-8) -> float:
    """Log-density of a scalar family by quadrature over the mixing value.

    Test oracle only. The integral runs over ``log(lam)``, which turns the
    polynomial tails of the mixing densities into exponential ones, and is
    split at quantiles of the mixing density. :class:`QuadratureError` is
    raised when a piece fails to converge or the estimated relative error of
    the density exceeds ``tol``.
    """
    if spec.dim != 1:
        raise ValueError("the quadrature oracle supports scalar specs only")
    x = float(x)
    if spec.family is Family.GAUSSIAN:
        return float(stats.norm.logpdf(x, spec.mu[0], math.sqrt(spec.Sigma[0, 0])))

    marginal = spec.mixing_marginal
    dist = marginal.frozen()
    lower, upper = dist.support()
    log_mix = marginal.log_density_fn()
    mu, S = float(spec.mu[0]), float(spec.Sigma[0, 0])
    beta = float(spec.beta[0]) if spec.is_nvmm else 0.0
    nvmm = spec.is_nvmm
    half_log_2pi = 0.5 * math.log(2 * math.pi)

    def log_integrand(u):
        if not -300.0 < u < 300.0:
            return -math.inf
        lam = math.exp(u)
        if not lower < lam < upper:
            return -math.inf
        if nvmm:
            m, v = mu + beta * lam, lam * S
        else:
            m, v = mu, S / lam
        if not (v > 0 and math.isfinite(v)):
            return -math.inf
        return -half_log_2pi - 0.5 * math.log(v) - 0.5 * (x - m) ** 2 / v + log_mix(lam) + u

    qs = dist.ppf([1e-9, 1e-4, 0.01, 0.1, 0.5, 0.9, 0.99, 1 - 1e-4, 1 - 1e-9])
    qs = np.log(qs[np.isfinite(qs) & (qs > 0)])
    u_hi = math.log(upper) if math.isfinite(upper) else math.inf
    # factor out the peak so far-tail points do not underflow
    grid = np.linspace(qs.min() - 20, min(qs.max() + 20, u_hi), 801)
    g = np.array([log_integrand(u) for u in grid])
    j = int(np.argmax(g))
    res = optimize.minimize_scalar(lambda u: -log_integrand(u), method="bounded",
                                   bounds=(grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]))
    peak = max(g[j], -res.fun)
    if not math.isfinite(peak):
        raise QuadratureError(f"integrand vanishes everywhere at x={x}")
    splits = np.concatenate([qs[qs < u_hi], [res.x]])
    edges = np.unique(np.concatenate([[-math.inf], splits, [u_hi]]))
    total, err_total = 0.0, 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, err, *rest = integrate.quad(
            lambda u: math.exp(log_integrand(u) - peak), a, b,
            epsabs=tol / 100, epsrel=1e-11, limit=200, full_output=1
        )
        info = rest[1] if len(rest) > 1 else ""
        if len(rest) > 1 and "roundoff" not in str(info):
            raise QuadratureError(f"quadrature did not converge on [{a}, {b}]: {info}")
        total += val
        err_total += err
    # ``tol`` bounds the relative error of the density, i.e. the absolute error of its log
    if err_total > tol * total or not total > 0:
        raise QuadratureError(f"relative quadrature error {err_total / total:.3g} exceeds {tol:g}")
    return math.log(total) + peak


def laplace_logpdf(x, mu: float, var: float):
    """Closed-form Laplace log-density with mean ``mu`` and variance ``var``."""
    b = math.sqrt(var / 2)
    return -math.log(2 * b) - np.abs(np.asarray(x) - mu) / b


def pearson_vii_logpdf(x, mu: float, Sigma: float, nu: float, delta: float):
    """Closed form of the Pearson VII mixture with ``lam ~ Ga(nu/2, delta/2)``.

    This is a t-type density with exponent ``-(nu+1)/2`` and scale
    ``delta * Sigma / nu``.
    """
    a, b = nu / 2, delta / 2
    r = (np.asarray(x) - mu) ** 2 / (2 * Sigma)
    return (a * math.log(b) + special.gammaln(a + 0.5) - special.gammaln(a)
            - 0.5 * math.log(2 * math.pi * Sigma) - (a + 0.5) * np.log(b + r))
