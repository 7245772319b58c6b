"""Benchmark targets: the Gaussian-mixture mean posterior and gradually
truncated multivariate Gaussians, plus mode-assignment analytics.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.special import logsumexp

from .model import TargetModel, TemperedPath, TemperatureSchedule
from .velocity import TruncationSchedule

__all__ = [
    "MixtureModel",
    "TruncatedGaussianTarget",
    "generate_mixture_data",
    "benchmark_mixture",
    "assign_mode",
    "default_truncation_schedule",
    "load_benchmark_observations",
    "equicorrelated",
]

BENCHMARK_SEED = 20150623
BENCHMARK_TRUE_MEANS = (-3.0, 0.0, 3.0, 6.0)
BENCHMARK_SIGMA = 0.55
BENCHMARK_NOBS = 100


def generate_mixture_data(true_means, sigma, m, seed):
    """Simulate ``m`` observations, exactly m/d per mixture component.

    Component i contributes m/d draws from N(true_means[i], sigma^2);
    deterministic given the seed.
    """
    true_means = np.atleast_1d(np.asarray(true_means, dtype=float))
    d = true_means.shape[0]
    if m % d != 0:
        raise ValueError("number of observations must be divisible by the "
                         "number of components")
    per = m // d
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    obs = np.repeat(true_means, per) + sigma * rng.standard_normal(m)
    return obs


def load_benchmark_observations():
    """Fixed benchmark dataset shipped as CSV (seed 20150623)."""
    with resources.files("gibbsflow.data").joinpath("mixture_observations.csv").open() as fh:
        return np.loadtxt(fh)


@dataclass(frozen=True)
class MixtureModel:
    """Posterior over the d component means of a univariate Gaussian mixture
    with equal weights, common known sigma and a uniform prior on
    [-10, 10]^d."""

    observations: np.ndarray
    sigma: float = BENCHMARK_SIGMA
    dim: int = 4
    box_halfwidth: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "observations",
                           np.asarray(self.observations, dtype=float))

    def log_prior(self, x):
        x = np.asarray(x, dtype=float)
        inside = np.all(np.abs(x) <= self.box_halfwidth, axis=-1)
        base = -self.dim * np.log(2 * self.box_halfwidth)
        return np.where(inside, base, -np.inf)

    def grad_log_prior(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def _component_logpdf(self, x):
        """Log N(y_j; x_i, sigma^2) for all (points, obs, component)."""
        x = np.asarray(x, dtype=float)
        diff = self.observations[..., :, None] - x[..., None, :]
        return -0.5 * (diff / self.sigma) ** 2 \
            - np.log(self.sigma) - 0.5 * np.log(2 * np.pi)

    def log_likelihood(self, x):
        x = np.asarray(x, dtype=float)
        comp = self._component_logpdf(x)
        # manual logsumexp: the component axis is short and these arrays are
        # huge inside quadrature loops, so avoid scipy's temporaries
        m = comp.max(axis=-1, keepdims=True)
        per_obs = np.log(np.exp(comp - m).sum(axis=-1)) + m[..., 0] \
            - np.log(self.dim)
        return per_obs.sum(axis=-1)

    def grad_log_likelihood(self, x):
        x = np.asarray(x, dtype=float)
        comp = self._component_logpdf(x)
        m = comp.max(axis=-1, keepdims=True)
        num = np.exp(comp - m)
        resp = num / num.sum(axis=-1, keepdims=True)
        diff = self.observations[..., :, None] - x[..., None, :]
        return (resp * diff / self.sigma ** 2).sum(axis=-2)

    def target_model(self) -> TargetModel:
        b = self.box_halfwidth
        box = np.tile([-b, b], (self.dim, 1)).astype(float)
        return TargetModel(self.dim, self.log_prior, self.log_likelihood,
                           self.grad_log_prior, self.grad_log_likelihood,
                           support=box, integration_box=box)

    def tempered_path(self, schedule: TemperatureSchedule) -> TemperedPath:
        return TemperedPath(self.target_model(), schedule)


def benchmark_mixture() -> MixtureModel:
    return MixtureModel(load_benchmark_observations())


def assign_mode(x, true_means):
    """Index (in lexicographic permutation order) of the permutation of the
    component means closest to x in squared distance."""
    x = np.asarray(x, dtype=float)
    true_means = np.asarray(true_means, dtype=float)
    perms = np.asarray(list(itertools.permutations(range(true_means.size))))
    dists = np.sum((x[..., None, :] - true_means[perms]) ** 2, axis=-1)
    return np.argmin(dists, axis=-1)


def equicorrelated(d, rho):
    """Covariance with unit variances and all pairwise correlations rho."""
    if not -1.0 / (d - 1) < rho < 1.0:
        raise ValueError("correlation outside the positive-definite range")
    return (1 - rho) * np.eye(d) + rho * np.ones((d, d))


@dataclass(frozen=True)
class TruncatedGaussianTarget:
    """N(mu, sigma) truncated component-wise to prod (a_i, b_i)."""

    mu: np.ndarray
    sigma: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sig = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), mu.shape).copy()
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), mu.shape).copy()
        if np.any(lo >= hi):
            raise ValueError("need lower < upper bounds")
        np.linalg.cholesky(sig)  # raises if not positive definite
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.mu.shape[0]

    @classmethod
    def orthant(cls, d, rho, xi):
        """The mu = (-xi, -xi, xi, xi, ...) pattern truncated to [0, inf)^d
        with equicorrelated covariance."""
        signs = np.where(np.arange(d) < d // 2, -1.0, 1.0)
        return cls(xi * signs, equicorrelated(d, rho),
                   np.zeros(d), np.full(d, np.inf))


def default_truncation_schedule(target: TruncatedGaussianTarget,
                                clip_sigmas=8.0) -> TruncationSchedule:
    """Gradual truncation alpha_i(t) = -1/t + 1 to the orthant a_i = 0 with
    static upper bounds; the moving bound is clipped to the mu +/- 8 sd box
    where the truncated mass is below double-precision resolution."""
    if np.any(target.lower != 0.0) or np.any(np.isfinite(target.upper)):
        raise ValueError("default schedule covers orthant targets only; "
                         "provide an explicit schedule otherwise")
    d = target.dim
    sd = np.sqrt(np.diag(target.sigma))
    clip_lo = target.mu - clip_sigmas * sd
    clip_hi = target.mu + clip_sigmas * sd

    def alpha(t):
        raw = -np.inf if t <= 0 else -1.0 / t + 1.0
        return np.maximum(np.full(d, raw), clip_lo)

    def dalpha(t):
        if t <= 0:
            return np.zeros(d)
        raw = -1.0 / t + 1.0
        return np.where(raw >= clip_lo, 1.0 / t ** 2, 0.0)

    def beta(t):
        return clip_hi.copy()

    def dbeta(t):
        return np.zeros(d)

    return TruncationSchedule(alpha, beta, dalpha, dbeta,
                              target.lower.copy(), target.upper.copy())
