"""Marginal-preserving AR(1) kernels for the mixing value.

Each kernel is a Pitt-Walker style auxiliary-variable chain: draw a latent
``z`` given the previous value, then draw the new value from the conjugate
posterior given ``z``. The invariant law is the noise family's mixing density
and the autocorrelation decays as ``rho ** lag``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import HgmNoiseSpec, MixingMarginal

DEFAULT_RHO = 0.05


@dataclass(frozen=True)
class MixingKernel:
    """Transition law ``p(lam_k | lam_{k-1})``.

    ``marginal`` is ``None`` for the degenerate (identity) kernel used with
    Gaussian noise. The auxiliary parameters are populated per marginal:

    * inverse gamma, shape > 1: ``alpha`` for ``lam' = (b + U lam) / V``,
      ``U ~ Ga(alpha, 1)``, ``V ~ Ga(a + alpha, 1)``;
    * inverse gamma, shape <= 1: ``c``, a Poisson-gamma chain on ``1 / lam``;
    * gamma: ``c``, ``z ~ Po(c lam)``, ``lam' ~ Ga(a + z, b + c)``;
    * beta ``Be(a, 1)``: ``m`` and ``p_next``; the binomial count is
      ``m`` or ``m + 1`` (the latter with probability ``p_next``) so any
      ``rho`` is reached exactly.
    """

    marginal: MixingMarginal | None
    rho: float
    alpha: float | None = None
    c: float | None = None
    m: int | None = None
    p_next: float | None = None

    @property
    def degenerate(self) -> bool:
        return self.marginal is None

    @property
    def uses_reciprocal(self) -> bool:
        return self.marginal is not None and self.marginal.kind == "inverse_gamma" and self.c is not None

    def sample_invariant(self, rng: np.random.Generator, size=None):
        if self.marginal is None:
            return np.ones(size) if size is not None else 1.0
        return self.marginal.sample(rng, size)

    def step(self, lam_prev, rng: np.random.Generator):
        """One transition, vectorised over an array of previous values."""
        lam_prev = np.asarray(lam_prev, dtype=float)
        mg = self.marginal
        if mg is None:
            return lam_prev.copy()
        size = lam_prev.shape
        if mg.kind == "gamma":
            return _poisson_gamma_step(lam_prev, mg.a, mg.b, self.c, rng)
        if mg.kind == "inverse_gamma":
            if self.c is not None:
                return 1.0 / _poisson_gamma_step(1.0 / lam_prev, mg.a, mg.b, self.c, rng)
            u = rng.gamma(self.alpha, 1.0, size=size)
            v = rng.gamma(mg.a + self.alpha, 1.0, size=size)
            return (mg.b + u * lam_prev) / v
        if mg.kind == "beta":
            m = self.m + (rng.random(size) < self.p_next)
            z = rng.binomial(m, lam_prev)
            out = rng.beta(mg.a + z, mg.b + m - z)
            # Be(a, b) draws can round to exactly 1.0; keep the open support.
            return np.minimum(out, np.nextafter(1.0, 0.0))
        raise ValueError(f"unsupported marginal {mg.kind!r}")

    def describe(self) -> str:
        if self.marginal is None:
            return "degenerate"
        return f"{self.marginal.kind}(a={self.marginal.a:g}, b={self.marginal.b:g}) rho={self.rho:g}"


def _poisson_gamma_step(lam_prev, a, b, c, rng):
    z = rng.poisson(c * lam_prev)
    return rng.gamma(a + z, 1.0 / (b + c))


DEGENERATE = MixingKernel(marginal=None, rho=1.0)


def make_kernel(spec: HgmNoiseSpec, rho: float = DEFAULT_RHO) -> MixingKernel:
    """Build the AR(1) kernel whose invariant law is ``spec``'s mixing density."""
    marginal = spec.mixing_marginal
    if marginal is None:
        return DEGENERATE
    return kernel_for_marginal(marginal, rho)


def kernel_for_marginal(marginal: MixingMarginal, rho: float) -> MixingKernel:
    rho = float(rho)
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in the open interval (0, 1), got {rho}")
    a, b = marginal.a, marginal.b
    if marginal.kind == "gamma":
        return MixingKernel(marginal, rho, c=b * rho / (1 - rho))
    if marginal.kind == "inverse_gamma":
        if a > 1:
            # conditional-mean slope alpha / (a + alpha - 1) equals rho
            return MixingKernel(marginal, rho, alpha=rho * (a - 1) / (1 - rho))
        # no finite mean: run the chain on the gamma-distributed reciprocal
        return MixingKernel(marginal, rho, c=b * rho / (1 - rho))
    if marginal.kind == "beta":
        if b != 1.0:
            raise ValueError("beta kernel supports Be(a, 1) marginals only")
        # slope of kernel with count m is m / (a + 1 + m)
        target = rho * (a + 1) / (1 - rho)
        m = math.floor(target)
        r_lo = m / (a + 1 + m)
        r_hi = (m + 1) / (a + 2 + m)
        p_next = (rho - r_lo) / (r_hi - r_lo)
        return MixingKernel(marginal, rho, m=m, p_next=float(min(max(p_next, 0.0), 1.0)))
    raise ValueError(f"unsupported marginal {marginal.kind!r}")


def ig_alpha_from_rho(nu: float, rho: float) -> float:
    """Auxiliary shape for the ``IG(nu/2, nu/2)`` kernel with autocorrelation ``rho``."""
    if nu <= 2:
        raise ValueError("the inverse-gamma autocorrelation needs nu > 2")
    return rho * (nu - 2) / (2 * (1 - rho))


def ig_rho_from_alpha(nu: float, alpha: float) -> float:
    return 2 * alpha / (nu + 2 * alpha - 2)
