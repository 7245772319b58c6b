"""Target models, temperature schedules and the tempered curve of measures.

A target is described by an unnormalized log prior, a log likelihood and
their gradients.  The tempered curve interpolates prior and posterior by
raising the likelihood to a time-dependent power lambda(t); everything is
kept in log scale, exponentiation only happens inside quadrature integrands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SupportError",
    "TargetModel",
    "TemperatureSchedule",
    "TemperedPath",
    "linear_schedule",
    "power_schedule",
    "gaussian_target",
    "finite_difference_gradient",
]


class SupportError(ValueError):
    """Density evaluated outside the support of the model."""


def finite_difference_gradient(fun, eps=1e-6):
    """Central finite-difference gradient of ``fun`` (slow fallback).

    Intended only for models without analytic gradients; each call costs
    2 d function evaluations per point.
    """

    def grad(x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        out = np.empty(x.shape)
        for i in range(d):
            hi = x.copy()
            lo = x.copy()
            hi[..., i] += eps
            lo[..., i] -= eps
            out[..., i] = (fun(hi) - fun(lo)) / (2 * eps)
        return out

    return grad


@dataclass(frozen=True)
class TargetModel:
    """Prior/likelihood pair with gradients and a finite integration box.

    All callables follow the batch convention: input shape (..., d), scalar
    outputs of shape (...) and gradients of shape (..., d).  The integration
    box must be finite and contained in the support; quadrature replaces
    semi-infinite integration limits by the box edges, where the prior factor
    makes the truncated mass negligible.
    """

    dim: int
    log_prior: Callable
    log_likelihood: Callable
    grad_log_prior: Callable
    grad_log_likelihood: Callable
    support: np.ndarray
    integration_box: np.ndarray

    def __post_init__(self):
        box = np.atleast_2d(np.asarray(self.integration_box, dtype=float))
        sup = np.atleast_2d(np.asarray(self.support, dtype=float))
        if box.shape != (self.dim, 2) or sup.shape != (self.dim, 2):
            raise ValueError("support/integration_box must have shape (d, 2)")
        if not np.all(np.isfinite(box)):
            raise ValueError("integration_box must be finite")
        if np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("integration_box lower bounds must be below upper")
        if np.any(box[:, 0] < sup[:, 0]) or np.any(box[:, 1] > sup[:, 1]):
            raise ValueError("integration_box must lie inside the support")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "integration_box", box)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Strictly increasing C^1 map lambda: [0,1] -> [0,1] with its derivative."""

    value: Callable
    derivative: Callable
    name: str = "custom"


def linear_schedule() -> TemperatureSchedule:
    return TemperatureSchedule(lambda t: np.asarray(t, dtype=float),
                               lambda t: np.ones_like(np.asarray(t, dtype=float)),
                               name="linear")


def power_schedule(p: float) -> TemperatureSchedule:
    """lambda(t) = t**p.  Requires p >= 1 so the derivative is bounded at 0."""
    p = float(p)
    if p < 1:
        raise ValueError("power schedule requires p >= 1")
    if p == 1:
        return linear_schedule()

    def value(t):
        return np.asarray(t, dtype=float) ** p

    def derivative(t):
        return p * np.asarray(t, dtype=float) ** (p - 1)

    return TemperatureSchedule(value, derivative, name=f"power({p:g})")


@dataclass(frozen=True)
class TemperedPath:
    """Curve of unnormalized densities gamma_t(x) = pi0(x) L(x)^lambda(t)."""

    model: TargetModel
    schedule: TemperatureSchedule = field(default_factory=linear_schedule)

    def log_gamma(self, x, t):
        x = np.asarray(x, dtype=float)
        out = self.model.log_prior(x) + self.schedule.value(t) * self.model.log_likelihood(x)
        if not np.all(np.isfinite(np.atleast_1d(out))):
            raise SupportError("density evaluated outside support")
        return out

    def dt_log_gamma(self, x, t):
        x = np.asarray(x, dtype=float)
        out = self.schedule.derivative(t) * self.model.log_likelihood(x)
        if not np.all(np.isfinite(np.atleast_1d(out))):
            raise SupportError("density evaluated outside support")
        return out

    def grad_log_gamma(self, x, t):
        x = np.asarray(x, dtype=float)
        lam = self.schedule.value(t)
        return self.model.grad_log_prior(x) + lam * self.model.grad_log_likelihood(x)


def gaussian_target(mu0, sigma0, sigma_l, y, box_sigmas=8.0) -> TargetModel:
    """Gaussian prior N(mu0, sigma0) with Gaussian-kernel likelihood
    L(x) = exp(-(x-y)' sigma_l^{-1} (x-y) / 2).

    The integration box defaults to the prior mean +/- ``box_sigmas`` prior
    standard deviations per coordinate.
    """
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = mu0.shape[0]
    sigma0 = np.atleast_2d(np.asarray(sigma0, dtype=float))
    sigma_l = np.atleast_2d(np.asarray(sigma_l, dtype=float))
    prec0 = np.linalg.inv(sigma0)
    prec_l = np.linalg.inv(sigma_l)
    sd0 = np.sqrt(np.diag(sigma0))

    def log_prior(x):
        r = np.asarray(x, dtype=float) - mu0
        return -0.5 * np.einsum("...i,ij,...j->...", r, prec0, r) \
            - 0.5 * d * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(sigma0)[1]

    def log_likelihood(x):
        r = np.asarray(x, dtype=float) - y
        return -0.5 * np.einsum("...i,ij,...j->...", r, prec_l, r)

    def grad_log_prior(x):
        return -(np.asarray(x, dtype=float) - mu0) @ prec0

    def grad_log_likelihood(x):
        return -(np.asarray(x, dtype=float) - y) @ prec_l

    inf = np.full((d, 2), [-np.inf, np.inf])
    box = np.stack([mu0 - box_sigmas * sd0, mu0 + box_sigmas * sd0], axis=1)
    return TargetModel(d, log_prior, log_likelihood, grad_log_prior,
                       grad_log_likelihood, support=inf, integration_box=box)
