"""Particle ensembles, weighting schemes, resampling, MCMC kernels and
normalizing-constant estimation.

Three samplers share one driver: "flow" (deterministic transport with
Jacobian-corrected weights), "ais" (annealed importance sampling with MCMC
moves) and "gibbs_ais" (transport map followed by MCMC moves).  Randomness
is drawn from counter-based streams keyed by (seed, operation, step), so
results are identical under any parallel execution schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .integrator import TimeGrid, _advance
from .model import TemperedPath

__all__ = [
    "EnsembleDiedError",
    "KernelConfig",
    "ParticleEnsemble",
    "SamplerSettings",
    "SamplerResult",
    "FlowProblem",
    "stream_rng",
    "ess",
    "resample",
    "rwmh_move",
    "mala_move",
    "ais_weight_update",
    "flow_weight_update",
    "gibbs_ais_step",
    "path_sampling_logz",
    "run_sampler",
    "conditional_smc",
    "tempered_problem",
    "truncated_problem",
]


class EnsembleDiedError(RuntimeError):
    """Every particle carries zero weight."""

    def __init__(self):
        super().__init__("ensemble died: all weights are zero")


def stream_rng(seed, *key):
    """Counter-based generator keyed by (seed, *key); order-independent."""
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=tuple(int(k) & 0xFFFFFFFF for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class KernelConfig:
    """MCMC kernel settings for the annealed samplers."""

    kind: str = "rwmh"            # "rwmh" or "mala"
    step_scale: float = 0.5
    covariance: Optional[np.ndarray] = None  # None means identity
    moves: int = 10
    acceptance_band: tuple = (0.15, 0.4)
    autotune: bool = True

    def __post_init__(self):
        if self.kind not in ("rwmh", "mala"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.step_scale <= 0 or self.moves < 0:
            raise ValueError("need step_scale > 0 and moves >= 0")

    def chol(self, d):
        if self.covariance is None:
            return np.eye(d)
        return np.linalg.cholesky(np.atleast_2d(self.covariance))


@dataclass
class ParticleEnsemble:
    """Positions, unnormalized log-weights and running log-Z estimate."""

    positions: np.ndarray
    log_weights: np.ndarray
    log_z: float = 0.0
    step_index: int = 0
    ancestry: list = dc_field(default_factory=list)

    @property
    def size(self):
        return self.positions.shape[0]

    def normalized_weights(self):
        lw = self.log_weights
        if not np.any(np.isfinite(lw)):
            raise EnsembleDiedError
        shifted = lw - np.max(lw[np.isfinite(lw)])
        w = np.exp(shifted, where=np.isfinite(shifted),
                   out=np.zeros_like(shifted))
        return w / w.sum()

    def ess(self):
        return ess(self.normalized_weights())


def ess(weights):
    """Effective sample size of normalized weights; lies in [1, N]."""
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if s <= 0:
        raise EnsembleDiedError
    w = w / s
    return float(1.0 / np.sum(w ** 2))


def _multinomial_indices(weights, n, rng):
    return rng.choice(weights.size, size=n, p=weights)

def _systematic_indices(weights, n, rng):
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


def resample(ensemble: ParticleEnsemble, scheme, rng) -> ParticleEnsemble:
    """Draw N offspring with expected count N w_i and reset weights.

    The running log-Z estimate is untouched; ancestor indices are recorded.
    """
    w = ensemble.normalized_weights()
    n = ensemble.size
    if scheme == "multinomial":
        idx = _multinomial_indices(w, n, rng)
    elif scheme == "systematic":
        idx = _systematic_indices(w, n, rng)
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return ParticleEnsemble(ensemble.positions[idx].copy(),
                            np.zeros(n), ensemble.log_z,
                            ensemble.step_index,
                            ensemble.ancestry + [idx])


def rwmh_move(x, log_density, cfg: KernelConfig, rng):
    """One vectorized random-walk Metropolis-Hastings sweep.

    Returns (new positions, acceptance mask).  Proposals into zero-density
    regions are always rejected.
    """
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    chol = cfg.chol(d)
    prop = x + cfg.step_scale * rng.standard_normal((n, d)) @ chol.T
    cur = np.asarray(log_density(x), dtype=float)
    new = np.asarray(log_density(prop), dtype=float)
    new = np.where(np.isfinite(new), new, -np.inf)
    logu = np.log(rng.random(n))
    # -inf minus -inf is nan; nan compares false, so such proposals reject
    with np.errstate(invalid="ignore"):
        accept = logu < (new - cur)
    out = np.where(accept[:, None], prop, x)
    return out, accept


def mala_move(x, log_density, grad_log_density, cfg: KernelConfig, rng):
    """One vectorized Metropolis-adjusted Langevin sweep.

    Not offered for truncated targets, whose gradients can point into
    zero-probability regions.
    """
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    eps = cfg.step_scale
    gx = np.asarray(grad_log_density(x), dtype=float)
    mean_fwd = x + 0.5 * eps ** 2 * gx
    prop = mean_fwd + eps * rng.standard_normal((n, d))
    gp = np.asarray(grad_log_density(prop), dtype=float)
    mean_bwd = prop + 0.5 * eps ** 2 * gp
    cur = np.asarray(log_density(x), dtype=float)
    new = np.asarray(log_density(prop), dtype=float)
    new = np.where(np.isfinite(new), new, -np.inf)
    log_q_fwd = -np.sum((prop - mean_fwd) ** 2, axis=1) / (2 * eps ** 2)
    log_q_bwd = -np.sum((x - mean_bwd) ** 2, axis=1) / (2 * eps ** 2)
    logu = np.log(rng.random(n))
    with np.errstate(invalid="ignore"):
        accept = logu < (new - cur + log_q_bwd - log_q_fwd)
    out = np.where(accept[:, None], prop, x)
    return out, accept


def _logz_increment(log_weights, increments):
    """Log of sum_i Wbar_i exp(increment_i) with Wbar the normalized weights."""
    finite = np.isfinite(log_weights)
    if not finite.any():
        raise EnsembleDiedError
    norm = log_weights - logsumexp(log_weights[finite])
    total = norm + np.where(np.isfinite(increments), increments, -np.inf)
    if not np.any(np.isfinite(total)):
        return -np.inf
    return float(logsumexp(total[np.isfinite(total)]))


def ais_weight_update(ensemble: ParticleEnsemble, path: TemperedPath,
                      t_prev, t_new) -> ParticleEnsemble:
    """Annealing weight update: the tempering increment at the current
    positions (before any MCMC move)."""
    dlam = float(path.schedule.value(t_new) - path.schedule.value(t_prev))
    incr = dlam * np.asarray(path.model.log_likelihood(ensemble.positions))
    incr = np.where(np.isfinite(incr), incr, -np.inf)
    logz = ensemble.log_z + _logz_increment(ensemble.log_weights, incr)
    return ParticleEnsemble(ensemble.positions, ensemble.log_weights + incr,
                            logz, ensemble.step_index + 1, ensemble.ancestry)


def flow_weight_update(ensemble: ParticleEnsemble, log_gamma,
                       t_prev, t_new, x_prev, x_new,
                       step_logdet, failed=None) -> ParticleEnsemble:
    """Transport weight update with the Jacobian-determinant correction.

    ``log_gamma(x, t)`` evaluates the unnormalized log-density; failed
    trajectories get weight zero.
    """
    g_new = np.asarray(log_gamma(x_new, t_new), dtype=float)
    g_old = np.asarray(log_gamma(x_prev, t_prev), dtype=float)
    with np.errstate(invalid="ignore"):
        incr = np.where(np.isfinite(g_new) & np.isfinite(g_old),
                        g_new - g_old + step_logdet, -np.inf)
    if failed is not None:
        incr = np.where(failed, -np.inf, incr)
    logz = ensemble.log_z + _logz_increment(ensemble.log_weights, incr)
    return ParticleEnsemble(x_new, ensemble.log_weights + incr, logz,
                            ensemble.step_index + 1, ensemble.ancestry)


def path_sampling_logz(i_hat, grid: TimeGrid, schedule) -> float:
    """Trapezoidal path-sampling estimate of log Z from per-time weighted
    estimates of the expected log-likelihood."""
    t = grid.knots
    y = np.asarray(schedule.derivative(t), dtype=float) * np.asarray(i_hat, dtype=float)
    return float(np.trapezoid(y, t))


# ---------------------------------------------------------------------------
# Sampler driver


@dataclass(frozen=True)
class FlowProblem:
    """Everything the annealed sampler driver needs about a target.

    ``log_gamma(x, t)`` must be safe: -inf outside the support, no raising.
    ``field`` provides velocity/Jacobian batches for the transport schemes
    (None for plain AIS); ``grad_log_gamma`` may be None (disables MALA).
    ``log_likelihood`` enables the path-sampling log-Z estimate.
    """

    dim: int
    log_gamma: Callable
    sample_initial: Callable
    field: Optional[Callable] = None
    grad_log_gamma: Optional[Callable] = None
    log_likelihood: Optional[Callable] = None


def _safe_log_gamma_from_path(path: TemperedPath):
    model = path.model

    def log_gamma(x, t):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            out = model.log_prior(x) + float(path.schedule.value(t)) \
                * model.log_likelihood(x)
        return np.where(np.isfinite(out), out, -np.inf)

    return log_gamma


def tempered_problem(path: TemperedPath, sample_initial, field=None) -> FlowProblem:
    """Wrap a tempered path for the sampler driver."""

    def grad(x, t):
        return path.grad_log_gamma(x, t)

    def loglik(x):
        out = np.asarray(path.model.log_likelihood(x), dtype=float)
        return np.where(np.isfinite(out), out, -np.inf)

    return FlowProblem(path.model.dim, _safe_log_gamma_from_path(path),
                       sample_initial, field, grad, loglik)


def truncated_problem(target, sched, rule, chunk=1024) -> FlowProblem:
    """Wrap a gradually truncated Gaussian for the sampler driver.

    MALA is not available: the Gaussian gradient may point into the
    truncated region.
    """
    from .velocity import truncated_field, _GaussianPrior, _clipped_bounds

    prior = _GaussianPrior(target.mu, target.sigma)
    fld = truncated_field(target.mu, target.sigma, sched, rule, chunk=chunk)

    def log_gamma(x, t):
        x = np.asarray(x, dtype=float)
        alpha, beta, _, _ = _clipped_bounds(prior, sched, t)
        inside = np.all((x >= alpha) & (x <= beta), axis=-1)
        return np.where(inside, prior.log_density(x), -np.inf)

    def sample_initial(rng, n):
        chol = np.linalg.cholesky(prior.sigma)
        return prior.mu + rng.standard_normal((n, prior.dim)) @ chol.T

    return FlowProblem(target.dim, log_gamma, sample_initial, fld, None, None)


@dataclass
class SamplerSettings:
    scheme: str                 # "flow" | "ais" | "gibbs_ais"
    n_particles: int
    grid: TimeGrid
    kernel: Optional[KernelConfig] = None
    resample_scheme: str = "systematic"
    resample_threshold: float = 0.5   # fraction of N; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("flow", "ais", "gibbs_ais"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme in ("ais", "gibbs_ais") and self.kernel is None:
            self.kernel = KernelConfig()


@dataclass
class SamplerResult:
    ensemble: ParticleEnsemble
    times: np.ndarray
    ess_trace: np.ndarray
    logz_trace: np.ndarray
    acceptance_trace: np.ndarray
    resampled: np.ndarray
    n_failed: int
    log_z: float
    i_hat_trace: Optional[np.ndarray]
    eval_cost: int

    def path_sampling_log_z(self, schedule):
        if self.i_hat_trace is None:
            raise ValueError("target exposes no log-likelihood; path "
                             "sampling unavailable")
        return path_sampling_logz(self.i_hat_trace, TimeGrid(self.times),
                                  schedule)


def _mcmc_sweeps(x, log_density, grad_log_density, cfg, seed, step, tag):
    acc_total, n_total = 0, 0
    for k in range(cfg.moves):
        rng = stream_rng(seed, tag, step, k)
        if cfg.kind == "rwmh":
            x, acc = rwmh_move(x, log_density, cfg, rng)
        else:
            if grad_log_density is None:
                raise ValueError("MALA requires gradients; not available "
                                 "for this target")
            x, acc = mala_move(x, log_density, grad_log_density, cfg, rng)
    # acceptance from the final sweep is representative enough for tuning
        acc_total += int(acc.sum())
        n_total += acc.size
    rate = acc_total / n_total if n_total else 0.0
    return x, rate


def _autotune(cfg: KernelConfig, rate, step):
    # Robbins-Monro on log step scale toward the middle of the band
    if not cfg.autotune or cfg.moves == 0:
        return
    target = 0.5 * (cfg.acceptance_band[0] + cfg.acceptance_band[1])
    gain = 1.0 / np.sqrt(step + 1)
    cfg.step_scale = float(cfg.step_scale * np.exp(gain * (rate - target)))


def gibbs_ais_step(ensemble, problem: FlowProblem, settings, t_prev, t_new,
                   step):
    """One transport-plus-weighting step (no MCMC move, no resampling)."""
    dt = t_new - t_prev
    x_new, logdet, ok = _advance(problem.field, ensemble.positions,
                                 t_prev, dt, True, 0, [0])
    x_new = np.where(np.isfinite(x_new), x_new, ensemble.positions)
    return flow_weight_update(ensemble, problem.log_gamma, t_prev, t_new,
                              ensemble.positions, x_new, logdet,
                              failed=~ok), (~ok)


def run_sampler(problem: FlowProblem, settings: SamplerSettings) -> SamplerResult:
    """Drive one of the three annealed samplers across the time grid.

    Order within a step: transport map (if any), weight update, ESS check
    and resampling, then MCMC moves targeting the new temperature.
    """
    if settings.scheme in ("flow", "gibbs_ais") and problem.field is None:
        raise ValueError("transport schemes need a velocity field")
    n = settings.n_particles
    grid = settings.grid
    m = len(grid)
    rng0 = stream_rng(settings.seed, 0xA11CE)
    x0 = problem.sample_initial(rng0, n)
    ens = ParticleEnsemble(x0, np.zeros(n))
    kernel = settings.kernel
    use_moves = settings.scheme in ("ais", "gibbs_ais") and kernel is not None

    ess_trace = np.empty(m)
    logz_trace = np.empty(m)
    acc_trace = np.zeros(m)
    resampled = np.zeros(m, dtype=bool)
    i_hat = None
    if problem.log_likelihood is not None:
        i_hat = np.empty(m + 1)
        w0 = ens.normalized_weights()
        i_hat[0] = float(w0 @ problem.log_likelihood(ens.positions))
    n_failed = 0
    eval_cost = 0

    for nstep in range(1, m + 1):
        t0, t1 = grid.knots[nstep - 1], grid.knots[nstep]
        if settings.scheme in ("flow", "gibbs_ais"):
            ens, failed = gibbs_ais_step(ens, problem, settings, t0, t1, nstep)
            n_failed += int(failed.sum())
            eval_cost += 3 * n  # one field batch plus two density batches
        else:
            with np.errstate(invalid="ignore"):
                dlam_incr = problem.log_gamma(ens.positions, t1) \
                    - problem.log_gamma(ens.positions, t0)
            incr = np.where(np.isfinite(dlam_incr), dlam_incr, -np.inf)
            logz = ens.log_z + _logz_increment(ens.log_weights, incr)
            ens = ParticleEnsemble(ens.positions, ens.log_weights + incr,
                                   logz, nstep, ens.ancestry)
            eval_cost += 2 * n
        ess_trace[nstep - 1] = ens.ess()
        logz_trace[nstep - 1] = ens.log_z

        if settings.resample_threshold and \
                ess_trace[nstep - 1] < settings.resample_threshold * n:
            ens = resample(ens, settings.resample_scheme,
                           stream_rng(settings.seed, 0x5E5A, nstep))
            resampled[nstep - 1] = True

        if use_moves and kernel.moves:
            def logdens(x, t1=t1):
                return problem.log_gamma(x, t1)

            graddens = None
            if problem.grad_log_gamma is not None:
                def graddens(x, t1=t1):
                    return problem.grad_log_gamma(x, t1)

            x_new, rate = _mcmc_sweeps(ens.positions, logdens, graddens,
                                       kernel, settings.seed, nstep, 0x3C3C)
            acc_trace[nstep - 1] = rate
            _autotune(kernel, rate, nstep)
            eval_cost += 2 * n * kernel.moves
            ens = ParticleEnsemble(x_new, ens.log_weights, ens.log_z,
                                   nstep, ens.ancestry)

        if i_hat is not None:
            w = ens.normalized_weights()
            i_hat[nstep] = float(w @ problem.log_likelihood(ens.positions))

    return SamplerResult(ens, grid.knots.copy(), ess_trace, logz_trace,
                         acc_trace, resampled, n_failed, ens.log_z,
                         i_hat, eval_cost)


# ---------------------------------------------------------------------------
# Conditional SMC


def conditional_smc(reference, problem: FlowProblem,
                    settings: SamplerSettings, seed):
    """One conditional sweep of the gibbs_ais sampler with particle 0 pinned
    to the reference path of post-move states.

    ``reference`` has shape (M+1, d) (or None for an unconditional first
    sweep).  Returns ``(new_reference, sample, ensemble)`` where ``sample``
    is a draw from the terminal ensemble.
    """
    n = settings.n_particles
    grid = settings.grid
    m = len(grid)
    d = problem.dim
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        if reference.shape != (m + 1, d):
            raise ValueError("reference path incompatible with the time grid")
    kernel = settings.kernel or KernelConfig(moves=0)

    rng0 = stream_rng(seed, 0xA11CE)
    x = problem.sample_initial(rng0, n)
    if reference is not None:
        x[0] = reference[0]
    paths = np.empty((n, m + 1, d))
    paths[:, 0] = x
    logw = np.zeros(n)
    logz = 0.0

    for nstep in range(1, m + 1):
        t0, t1 = grid.knots[nstep - 1], grid.knots[nstep]
        dt = t1 - t0
        x_new, logdet, ok = _advance(problem.field, x, t0, dt, True, 0, [0])
        x_new = np.where(np.isfinite(x_new), x_new, x)
        g_new = problem.log_gamma(x_new, t1)
        g_old = problem.log_gamma(x, t0)
        with np.errstate(invalid="ignore"):
            incr = np.where(ok & np.isfinite(g_new) & np.isfinite(g_old),
                            g_new - g_old + logdet, -np.inf)
        logz += _logz_increment(logw, incr)
        logw = logw + incr
        x = x_new

        if settings.resample_threshold and \
                ParticleEnsemble(x, logw).ess() < settings.resample_threshold * n:
            w = ParticleEnsemble(x, logw).normalized_weights()
            rng = stream_rng(seed, 0x5E5A, nstep)
            idx = _multinomial_indices(w, n, rng)
            idx[0] = 0  # conditional resampling keeps the pinned particle
            x = x[idx].copy()
            paths = paths[idx].copy()
            logw = np.zeros(n)

        if kernel.moves:
            def logdens(xq, t1=t1):
                return problem.log_gamma(xq, t1)

            x, rate = _mcmc_sweeps(x, logdens, None, kernel, seed, nstep, 0x3C3C)
            _autotune(kernel, rate, nstep)
        if reference is not None:
            x[0] = reference[nstep]
        paths[:, nstep] = x

    ens = ParticleEnsemble(x, logw, logz, m)
    w = ens.normalized_weights()
    pick = int(stream_rng(seed, 0xF17A).choice(n, p=w))
    return paths[pick].copy(), x[pick].copy(), ens
