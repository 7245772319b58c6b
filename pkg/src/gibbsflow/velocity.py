"""Gibbs velocity fields, their Jacobians and the Liouville residual.

The Gibbs field tracks every full conditional of the tempered curve using
one-dimensional integrals only.  All integrals along a coordinate slice are
evaluated on two closed composite Newton-Cotes grids, [lo, x_i] and
[x_i, hi], so the particle coordinate is always an endpoint node; the
Jacobian entries then follow from the fundamental-theorem identity for the
prefix of a closed rule, with every integral computed by the same rule as
the velocity.

Functions accept a single point of shape (d,) or a batch of shape (N, d).
Batch evaluations never raise on individual bad particles: their velocity
rows are returned as NaN for the caller (the flow integrator) to handle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import SupportError, TemperedPath
from .quadrature import QuadratureRule

__all__ = [
    "VelocityEvaluation",
    "TruncationSchedule",
    "gibbs_velocity",
    "gibbs_jacobian",
    "gibbs_field",
    "truncated_velocity",
    "truncated_jacobian",
    "truncated_field",
    "local_error",
]

_TINY = 1e-300


@dataclass
class VelocityEvaluation:
    """Velocity vector, optional Jacobian and per-coordinate diagnostics."""

    velocity: np.ndarray
    jacobian: Optional[np.ndarray]
    conditional_cdf: np.ndarray
    conditional_expected_loglik: np.ndarray


@dataclass(frozen=True)
class TruncationSchedule:
    """Moving per-coordinate truncation bounds alpha_i(t) < beta_i(t).

    ``alpha``/``beta`` map a scalar t to (d,) arrays; ``dalpha``/``dbeta``
    are their time derivatives.  ``terminal_lower``/``terminal_upper`` hold
    the t = 1 bounds.
    """

    alpha: Callable
    beta: Callable
    dalpha: Callable
    dbeta: Callable
    terminal_lower: np.ndarray
    terminal_upper: np.ndarray


def _segment_nodes(lo, hi, r):
    """Equispaced nodes per particle: lo, hi of shape (N,), output (N, r)."""
    frac = np.linspace(0.0, 1.0, r)
    return lo[:, None] + (hi - lo)[:, None] * frac


def _closed_weights(kind, r):
    """Composite weights on the unit interval (scale by segment length)."""
    h = 1.0 / (r - 1)
    w = np.empty(r)
    if kind == "trapezoid":
        w[:] = h
        w[0] = w[-1] = h / 2
    else:
        w[0::2] = 2 * h / 3
        w[1::2] = 4 * h / 3
        w[0] = w[-1] = h / 3
    return w


class _Slice:
    """Node grid and scaled density evaluations along one coordinate.

    Holds everything the velocity and Jacobian formulas need for coordinate
    ``i`` of a particle batch: nodes of the two segments, exp(log gamma - c)
    at the nodes with one max-subtraction constant per slice, and the
    per-particle composite weights.
    """

    def __init__(self, rule, x, i, lo, hi, log_density, r=None):
        x = np.asarray(x, dtype=float)
        n, d = x.shape
        r = rule.points if r is None else r
        # out-of-interval coordinates are clipped so the segment grids stay
        # valid; callers mask such particles out afterwards
        xi = np.clip(x[:, i], lo, hi)
        self.left_nodes = _segment_nodes(np.full(n, lo), xi, r)
        self.right_nodes = _segment_nodes(xi, np.full(n, hi), r)
        self.nodes = np.concatenate([self.left_nodes, self.right_nodes], axis=1)
        pts = np.broadcast_to(x[:, None, :], (n, 2 * r, d)).copy()
        pts[:, :, i] = self.nodes
        self.points = pts
        self.i = i
        logg = np.asarray(log_density(pts), dtype=float)
        logg = np.where(np.isfinite(logg), logg, -np.inf)
        self.shift = np.max(logg, axis=1)
        self.shift = np.where(np.isfinite(self.shift), self.shift, 0.0)
        self.w = np.exp(logg - self.shift[:, None])
        base = _closed_weights(rule.kind, r)
        self.left_weights = base[None, :] * (xi - lo)[:, None]
        self.right_weights = base[None, :] * (hi - xi)[:, None]
        self.weights = np.concatenate([self.left_weights, self.right_weights], axis=1)
        self.r = r
        # x_i is the last node of the left segment (and first of the right)
        self.w_at_x = self.w[:, r - 1]

    def integral(self, extra=None):
        """Full-slice integral of w (optionally times ``extra``)."""
        v = self.w if extra is None else self.w * extra
        return np.einsum("nr,nr->n", self.weights, v)

    def prefix(self, extra=None):
        """Integral over [lo, x_i] of w (optionally times ``extra``)."""
        v = self.w[:, : self.r] if extra is None else self.w[:, : self.r] * extra[:, : self.r]
        return np.einsum("nr,nr->n", self.left_weights, v)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def _gibbs_eval(path: TemperedPath, rule: QuadratureRule, x, t, with_jacobian,
                dt=None):
    x, single = _as_batch(x)
    n, d = x.shape
    model = path.model
    lam = float(path.schedule.value(t))
    if dt is None:
        dlam = float(path.schedule.derivative(t))
    else:
        # secant slope over the step the integrator is about to take; the
        # field is linear in the slope, and the discrete map then tracks the
        # schedule exactly across the step instead of to first order only
        dlam = float(path.schedule.value(t + dt) - lam) / dt
    box = model.integration_box

    def log_gamma(pts):
        return model.log_prior(pts) + lam * model.log_likelihood(pts)

    vel = np.empty((n, d))
    cdf = np.empty((n, d))
    cond_loglik = np.empty((n, d))
    jac = np.empty((n, d, d)) if with_jacobian else None
    outside = np.any((x < box[:, 0]) | (x > box[:, 1]), axis=1)
    loglik_x = model.log_likelihood(np.clip(x, box[:, 0], box[:, 1]))
    if with_jacobian:
        grad_logg_x = path.grad_log_gamma(np.clip(x, box[:, 0], box[:, 1]), t)

    for i in range(d):
        sl = _Slice(rule, x, i, box[i, 0], box[i, 1], log_gamma)
        loglik_nodes = model.log_likelihood(sl.points)
        a_full = sl.integral()
        a_lo = sl.prefix()
        b_full = sl.integral(loglik_nodes)
        b_lo = sl.prefix(loglik_nodes)
        with np.errstate(divide="ignore", invalid="ignore"):
            f_cdf = a_lo / a_full
            f_cdf = np.clip(f_cdf, 0.0, 1.0)
            vel[:, i] = dlam * (f_cdf * b_full - b_lo) / sl.w_at_x
            cond_loglik[:, i] = b_full / a_full
        cdf[:, i] = f_cdf
        bad = (sl.w_at_x < _TINY) | (a_full < _TINY) | outside
        vel[bad, i] = np.nan

        if with_jacobian:
            grad_prior_nodes = model.grad_log_prior(sl.points)
            grad_lik_nodes = model.grad_log_likelihood(sl.points)
            grad_logg_nodes = grad_prior_nodes + lam * grad_lik_nodes
            with np.errstate(divide="ignore", invalid="ignore"):
                jac[:, i, i] = dlam * (b_full / a_full - loglik_x) \
                    - vel[:, i] * grad_logg_x[:, i]
                for k in range(d):
                    if k == i:
                        continue
                    gk = grad_logg_nodes[:, :, k]
                    lk = grad_lik_nodes[:, :, k]
                    c_full = sl.integral(gk)
                    c_lo = sl.prefix(gk)
                    mixed = lk + loglik_nodes * gk
                    e_full = sl.integral(mixed)
                    e_lo = sl.prefix(mixed)
                    dcdf = (c_lo - f_cdf * c_full) / a_full
                    jac[:, i, k] = dlam * (dcdf * b_full + f_cdf * e_full - e_lo) \
                        / sl.w_at_x - vel[:, i] * grad_logg_x[:, k]
            jac[bad, i, :] = np.nan

    ev = VelocityEvaluation(vel, jac, cdf, cond_loglik)
    if single:
        ev = VelocityEvaluation(
            vel[0], None if jac is None else jac[0], cdf[0], cond_loglik[0])
        if not np.all(np.isfinite(ev.velocity)):
            raise SupportError("particle outside effective support")
    return ev


def gibbs_velocity(path: TemperedPath, rule: QuadratureRule, x, t) -> VelocityEvaluation:
    """Gibbs velocity field at (x, t); no Jacobian."""
    return _gibbs_eval(path, rule, x, t, with_jacobian=False)


def gibbs_jacobian(path: TemperedPath, rule: QuadratureRule, x, t) -> np.ndarray:
    """d x d Jacobian of the Gibbs velocity field at (x, t)."""
    return _gibbs_eval(path, rule, x, t, with_jacobian=True).jacobian


def _chunked(evaluate, chunk):
    """Split a batch field evaluation into particle chunks (memory cap)."""

    def field(x, t, with_jacobian=True, dt=None):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 or chunk is None or x.shape[0] <= chunk:
            return evaluate(x, t, with_jacobian, dt=dt)
        parts = [evaluate(x[i:i + chunk], t, with_jacobian, dt=dt)
                 for i in range(0, x.shape[0], chunk)]
        jac = None if parts[0].jacobian is None \
            else np.concatenate([p.jacobian for p in parts])
        return VelocityEvaluation(
            np.concatenate([p.velocity for p in parts]), jac,
            np.concatenate([p.conditional_cdf for p in parts]),
            np.concatenate([p.conditional_expected_loglik for p in parts]))

    return field


def gibbs_field(path: TemperedPath, rule: QuadratureRule, chunk=256):
    """Velocity+Jacobian provider for the flow integrator."""

    def evaluate(x, t, with_jacobian=True, dt=None):
        return _gibbs_eval(path, rule, x, t, with_jacobian, dt=dt)

    return _chunked(evaluate, chunk)


# ---------------------------------------------------------------------------
# Truncated-Gaussian flow


class _GaussianPrior:
    def __init__(self, mu, sigma):
        self.mu = np.atleast_1d(np.asarray(mu, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        self.prec = np.linalg.inv(self.sigma)
        self.dim = self.mu.shape[0]
        self.sd = np.sqrt(np.diag(self.sigma))

    def log_density(self, x):
        r = np.asarray(x, dtype=float) - self.mu
        return -0.5 * ((r @ self.prec) * r).sum(axis=-1)

    def grad_log_density(self, x):
        return -(np.asarray(x, dtype=float) - self.mu) @ self.prec

    def box(self, sigmas=8.0):
        return np.stack([self.mu - sigmas * self.sd, self.mu + sigmas * self.sd], axis=1)


def _clipped_bounds(prior: _GaussianPrior, sched: TruncationSchedule, t):
    """Current truncation bounds clipped to the mu +/- 8 sd box.

    Where the clip is active the moving bound is outside the box and the
    boundary-density terms vanish to double precision, so the corresponding
    derivative is treated as zero.
    """
    box = prior.box()
    alpha = np.asarray(sched.alpha(t), dtype=float)
    beta = np.asarray(sched.beta(t), dtype=float)
    dalpha = np.asarray(sched.dalpha(t), dtype=float)
    dbeta = np.asarray(sched.dbeta(t), dtype=float)
    alpha_c = np.maximum(alpha, box[:, 0])
    beta_c = np.minimum(beta, box[:, 1])
    dalpha = np.where(alpha >= box[:, 0], dalpha, 0.0)
    dbeta = np.where(beta <= box[:, 1], dbeta, 0.0)
    return alpha_c, beta_c, dalpha, dbeta


def _truncated_eval(prior, sched, rule, x, t, with_jacobian, dt=None):
    x, single = _as_batch(x)
    n, d = x.shape
    alpha, beta, dalpha, dbeta = _clipped_bounds(prior, sched, t)
    if dt is not None:
        # secant slopes of the clipped bounds over the step: the discrete map
        # then carries the boundary exactly onto the new boundary, removing
        # the leading mass-loss bias of the left-endpoint derivative
        alpha1, beta1, _, _ = _clipped_bounds(prior, sched, t + dt)
        dalpha = (alpha1 - alpha) / dt
        dbeta = (beta1 - beta) / dt
    outside = np.any((x < alpha) | (x > beta), axis=1)
    if single and outside[0]:
        raise SupportError("particle outside the current truncation region")

    vel = np.empty((n, d))
    cdf = np.empty((n, d))
    jac = np.empty((n, d, d)) if with_jacobian else None
    grad_x = prior.grad_log_density(x)

    # along a slice the Gaussian log-density is an explicit quadratic in the
    # node offset u - x_i, so nodes never need the generic density call:
    # log p(u) = log p(x) - q_i (u - x_i) - P_ii (u - x_i)^2 / 2
    r = x - prior.mu
    q = r @ prior.prec
    base = -0.5 * (r * q).sum(axis=1)
    frac = np.linspace(0.0, 1.0, rule.points)
    cw = _closed_weights(rule.kind, rule.points)

    for i in range(d):
        xi = np.clip(x[:, i], alpha[i], beta[i])
        left = alpha[i] + (xi - alpha[i])[:, None] * frac
        right = xi[:, None] + (beta[i] - xi)[:, None] * frac
        delta = np.concatenate([left, right], axis=1) - xi[:, None]

        def logdens(dlt):
            return base[:, None] - q[:, i, None] * dlt \
                - 0.5 * prior.prec[i, i] * dlt ** 2

        logg = logdens(delta)
        shift = np.max(logg, axis=1)
        w = np.exp(logg - shift[:, None])
        lw = cw[None, :] * (xi - alpha[i])[:, None]
        rw = cw[None, :] * (beta[i] - xi)[:, None]
        w_at_x = w[:, rule.points - 1]
        a_lo = np.einsum("nr,nr->n", lw, w[:, : rule.points])
        a_full = a_lo + np.einsum("nr,nr->n", rw, w[:, rule.points:])
        a_hi = a_full - a_lo
        w_alpha = w[:, 0]
        w_beta = w[:, -1]
        with np.errstate(divide="ignore", invalid="ignore"):
            num = dalpha[i] * w_alpha * a_hi + dbeta[i] * w_beta * a_lo
            vel[:, i] = num / (w_at_x * a_full)
            cdf[:, i] = np.clip(a_lo / a_full, 0.0, 1.0)
        bad = (w_at_x < _TINY) | (a_full < _TINY) | outside
        vel[bad, i] = np.nan

        if with_jacobian:
            with np.errstate(divide="ignore", invalid="ignore"):
                jac[:, i, i] = (dbeta[i] * w_beta - dalpha[i] * w_alpha) / a_full \
                    - vel[:, i] * grad_x[:, i]
                for k in range(d):
                    if k == i:
                        continue
                    # grad_k log p at the nodes is linear in the offset
                    gk = -(q[:, k, None] + prior.prec[k, i] * delta)
                    g_alpha = gk[:, 0]
                    g_beta = gk[:, -1]
                    c_lo = np.einsum("nr,nr->n", lw, (w * gk)[:, : rule.points])
                    c_full = c_lo + np.einsum("nr,nr->n", rw, (w * gk)[:, rule.points:])
                    c_hi = c_full - c_lo
                    dnum = dalpha[i] * w_alpha * (g_alpha * a_hi + c_hi) \
                        + dbeta[i] * w_beta * (g_beta * a_lo + c_lo)
                    jac[:, i, k] = dnum / (w_at_x * a_full) \
                        - vel[:, i] * (grad_x[:, k] + c_full / a_full)
            jac[bad, i, :] = np.nan

    diag = np.full((n, d), np.nan)
    ev = VelocityEvaluation(vel, jac, cdf, diag)
    if single:
        ev = VelocityEvaluation(
            vel[0], None if jac is None else jac[0], cdf[0], diag[0])
        if not np.all(np.isfinite(ev.velocity)):
            raise SupportError("particle outside effective support")
    return ev


def truncated_velocity(mu, sigma, sched: TruncationSchedule,
                       rule: QuadratureRule, x, t) -> VelocityEvaluation:
    """Gibbs flow velocity for a gradually truncated Gaussian N(mu, sigma)."""
    return _truncated_eval(_GaussianPrior(mu, sigma), sched, rule, x, t, False)


def truncated_jacobian(mu, sigma, sched: TruncationSchedule,
                       rule: QuadratureRule, x, t) -> np.ndarray:
    """Jacobian of the truncated-Gaussian Gibbs flow at (x, t)."""
    return _truncated_eval(_GaussianPrior(mu, sigma), sched, rule, x, t, True).jacobian


def truncated_field(mu, sigma, sched: TruncationSchedule,
                    rule: QuadratureRule, chunk=1024):
    """Velocity+Jacobian provider for the flow integrator."""
    prior = _GaussianPrior(mu, sigma)

    def evaluate(x, t, with_jacobian=True, dt=None):
        return _truncated_eval(prior, sched, rule, x, t, with_jacobian, dt=dt)

    return _chunked(evaluate, chunk)


# ---------------------------------------------------------------------------
# Liouville residual diagnostic


def local_error(path: TemperedPath, rule: QuadratureRule, x, t,
                tensor_rule: QuadratureRule) -> float:
    """Pointwise Liouville residual of the Gibbs flow against the tempered
    curve, normalized by tensor-grid quadrature over the integration box.

    Diagnostic only; restricted to d <= 3 because the normalization and the
    global expected log-likelihood need a d-dimensional tensor grid.
    """
    x = np.asarray(x, dtype=float)
    model = path.model
    d = model.dim
    if d > 3:
        raise ValueError("local_error needs a tensor grid; only d <= 3 supported")
    if x.shape != (d,):
        raise ValueError("local_error expects a single point of shape (d,)")
    lam = float(path.schedule.value(t))
    dlam = float(path.schedule.derivative(t))
    box = model.integration_box

    axes = [tensor_rule.nodes(box[i, 0], box[i, 1]) for i in range(d)]
    wts1 = [tensor_rule.weights(box[i, 0], box[i, 1]) for i in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wts = wts1[0]
    for w in wts1[1:]:
        wts = np.multiply.outer(wts, w)
    wts = wts.ravel()

    logg = model.log_prior(pts) + lam * model.log_likelihood(pts)
    logg = np.where(np.isfinite(logg), logg, -np.inf)
    shift = float(np.max(logg))
    wdens = np.exp(logg - shift)
    mass = float(wts @ wdens)
    loglik = model.log_likelihood(pts)
    i_t = float(wts @ (loglik * wdens)) / mass

    logg_x = model.log_prior(x) + lam * model.log_likelihood(x)
    pi_x = np.exp(logg_x - shift) / mass
    loglik_x = float(model.log_likelihood(x))

    ev = _gibbs_eval(path, rule, x, t, with_jacobian=False)
    cond = ev.conditional_expected_loglik
    resid = loglik_x - i_t - np.sum(loglik_x - cond)
    return float(dlam * pi_x * abs(resid))
