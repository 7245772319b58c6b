"""Closed-form Gaussian flows used as oracles and demonstrations.

For a Gaussian prior with Gaussian-kernel likelihood, every member of the
tempered curve is Gaussian with parameters available in closed form.  This
module provides those parameters, the minimal-kinetic-energy field, the
exact scalar transport map, the divergent anti-derivative field on R^2 and
a two-dimensional Knothe-style field computed by tensor quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .model import TemperatureSchedule
from .quadrature import QuadratureRule

__all__ = [
    "GaussianPath",
    "gaussian_params",
    "gaussian_expected_loglik",
    "minke_velocity",
    "one_d_exact_map",
    "antiderivative_velocity",
    "knothe_velocity_2d",
]


@dataclass(frozen=True)
class GaussianPath:
    """Gaussian prior N(mu0, sigma0) with likelihood
    exp(-(x-y)' sigma_l^{-1} (x-y)/2)."""

    mu0: np.ndarray
    sigma0: np.ndarray
    sigma_l: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.atleast_1d(np.asarray(self.mu0, float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, float)))
        object.__setattr__(self, "sigma0", np.atleast_2d(np.asarray(self.sigma0, float)))
        object.__setattr__(self, "sigma_l", np.atleast_2d(np.asarray(self.sigma_l, float)))

    @property
    def dim(self):
        return self.mu0.shape[0]


def gaussian_params(gp: GaussianPath, schedule: TemperatureSchedule, t):
    """Mean and covariance of the tempered Gaussian at time t."""
    lam = float(schedule.value(t))
    prec0 = np.linalg.inv(gp.sigma0)
    prec_l = np.linalg.inv(gp.sigma_l)
    prec_t = prec0 + lam * prec_l
    sigma_t = np.linalg.inv(prec_t)
    mu_t = sigma_t @ (prec0 @ gp.mu0 + lam * prec_l @ gp.y)
    return mu_t, sigma_t


def gaussian_expected_loglik(gp: GaussianPath, schedule: TemperatureSchedule, t):
    """Expected log-likelihood under the tempered Gaussian at time t."""
    mu_t, sigma_t = gaussian_params(gp, schedule, t)
    prec_l = np.linalg.inv(gp.sigma_l)
    r = mu_t - gp.y
    return float(-0.5 * (np.trace(prec_l @ sigma_t) + r @ prec_l @ r))


def minke_velocity(gp: GaussianPath, schedule: TemperatureSchedule, x, t):
    """Minimal-kinetic-energy field of the Gaussian curve (any dimension)."""
    x = np.asarray(x, dtype=float)
    mu_t, sigma_t = gaussian_params(gp, schedule, t)
    prec_l = np.linalg.inv(gp.sigma_l)
    dlam = float(schedule.derivative(t))
    return -0.5 * dlam * (x + mu_t - 2 * gp.y) @ prec_l @ sigma_t


def one_d_exact_map(gp: GaussianPath, schedule: TemperatureSchedule, x0, t):
    """Exact monotone transport of the scalar Gaussian flow.

    Pushes N(mu0, sigma0) onto N(mu_t, sigma_t) by the affine map
    mu_t + sqrt(sigma_t/sigma0) (x0 - mu0); solves the d = 1 flow ODE.
    """
    if gp.dim != 1:
        raise ValueError("one_d_exact_map requires a scalar path")
    mu_t, sigma_t = gaussian_params(gp, schedule, t)
    scale = np.sqrt(sigma_t[0, 0] / gp.sigma0[0, 0])
    return mu_t[0] + scale * (np.asarray(x0, dtype=float) - gp.mu0[0])


def antiderivative_velocity(gp: GaussianPath, gamma1, gamma2,
                            x, t, schedule: TemperatureSchedule):
    """Coupled anti-derivative field on the standard bivariate Gaussian curve.

    Only valid for mu0 = y = 0, sigma0 = sigma_l = I (the setting in which
    the field is available in closed form and provably produces divergent
    trajectories).  The truncated second moment of the marginal is computed
    analytically through the Gaussian CDF.
    """
    x = np.asarray(x, dtype=float)
    if gp.dim != 2 or np.any(gp.mu0 != 0) or np.any(gp.y != 0) \
            or not np.allclose(gp.sigma0, np.eye(2)) \
            or not np.allclose(gp.sigma_l, np.eye(2)):
        raise ValueError("anti-derivative field is only defined for the "
                         "standard bivariate case")
    if not np.isclose(gamma1 + gamma2, 1.0):
        raise ValueError("gamma1 + gamma2 must equal 1")
    lam = float(schedule.value(t))
    dlam = float(schedule.derivative(t))
    var = 1.0 / (1.0 + lam)
    sd = np.sqrt(var)

    def marginal_pdf(u):
        return norm.pdf(u, scale=sd)

    def marginal_cdf(u):
        return norm.cdf(u, scale=sd)

    def second_moment_prefix(u):
        # int_{-inf}^{u} v^2 N(v; 0, var) dv = var (CDF(u) - u pdf(u))
        return var * (marginal_cdf(u) - u * marginal_pdf(u))

    out = np.empty(2)
    gammas = (gamma1, gamma2)
    for i, j in ((0, 1), (1, 0)):
        xi, xj = x[i], x[j]
        out[i] = gammas[i] * dlam / (2 * marginal_pdf(xi)) * (
            second_moment_prefix(xi) + xj ** 2 * marginal_cdf(xi)
            - marginal_cdf(xi) / (1.0 + lam))
    return out


def knothe_velocity_2d(gp: GaussianPath, schedule: TemperatureSchedule,
                       x, t, tensor_rule: QuadratureRule, box_sigmas=8.0):
    """Two-dimensional Knothe-style flow field with the marginal CDF as
    regularizer, evaluated by tensor quadrature over the prior box.

    The first component tracks the marginal of coordinate 1, the second the
    conditional given coordinate 1; with a factorized target it reduces to
    two independent scalar flows.
    """
    x = np.asarray(x, dtype=float)
    if gp.dim != 2:
        raise ValueError("knothe_velocity_2d requires d = 2")
    lam = float(schedule.value(t))
    dlam = float(schedule.derivative(t))
    mu_t, sigma_t = gaussian_params(gp, schedule, t)
    prec_t = np.linalg.inv(sigma_t)
    it = gaussian_expected_loglik(gp, schedule, t)
    prec_l = np.linalg.inv(gp.sigma_l)
    norm_t = 1.0 / (2 * np.pi * np.sqrt(np.linalg.det(sigma_t)))
    sd0 = np.sqrt(np.diag(gp.sigma0))
    lo = gp.mu0 - box_sigmas * sd0
    hi = np.maximum(gp.mu0, gp.y) + box_sigmas * sd0

    def pdf_t(pts):
        r = pts - mu_t
        return norm_t * np.exp(-0.5 * np.einsum("...i,ij,...j->...", r, prec_t, r))

    def loglik(pts):
        r = pts - gp.y
        return -0.5 * np.einsum("...i,ij,...j->...", r, prec_l, r)

    def dt_pdf(pts):
        return dlam * (loglik(pts) - it) * pdf_t(pts)

    # marginal of coordinate 1 under pi_t
    m1, s1 = mu_t[0], np.sqrt(sigma_t[0, 0])
    g1 = norm.cdf(x[0], loc=m1, scale=s1)
    g1p = norm.pdf(x[0], loc=m1, scale=s1)

    pix = float(pdf_t(x))

    # component 1: 1-D integrals over u1 at fixed x2
    u1_full = tensor_rule.nodes(lo[0], hi[0])
    w1_full = tensor_rule.weights(lo[0], hi[0])
    pts_full = np.stack([u1_full, np.full_like(u1_full, x[1])], axis=-1)
    int_full = float(w1_full @ dt_pdf(pts_full))
    if x[0] > lo[0]:
        u1_pre = tensor_rule.nodes(lo[0], x[0])
        w1_pre = tensor_rule.weights(lo[0], x[0])
        pts_pre = np.stack([u1_pre, np.full_like(u1_pre, x[1])], axis=-1)
        int_pre = float(w1_pre @ dt_pdf(pts_pre))
    else:
        int_pre = 0.0
    f1 = -(int_pre - g1 * int_full) / pix

    # component 2: tensor integral over u1, prefix in u2
    if x[1] > lo[1]:
        u2p = tensor_rule.nodes(lo[1], x[1])
        w2p = tensor_rule.weights(lo[1], x[1])
        uu1p, uu2p = np.meshgrid(u1_full, u2p, indexing="ij")
        inner_p = w1_full @ dt_pdf(np.stack([uu1p, uu2p], axis=-1))
        pre2 = float(w2p @ inner_p)
    else:
        pre2 = 0.0
    f2 = -g1p * pre2 / pix
    return np.array([f1, f2])
