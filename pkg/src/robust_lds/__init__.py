"""Robust online state estimation for linear dynamic systems with
heavy-tailed or skewed noise, via a Rao-Blackwellized particle filter."""
from .distributions import Family, HgmNoiseSpec, conditional_gaussian, marginal_logpdf_oracle
from .kalman import GaussianBelief, KalmanFilter, LdsModel
from .mixing import MixingKernel, make_kernel
from .rbpf import RBPF

__all__ = [
    "Family", "HgmNoiseSpec", "conditional_gaussian", "marginal_logpdf_oracle",
    "GaussianBelief", "KalmanFilter", "LdsModel", "MixingKernel", "make_kernel", "RBPF",
]
__version__ = "0.1.0"
