"""Time grids, forward-Euler flow maps and adaptive-step diagnostics.

The weighted transport path uses forward Euler only: each step is an
explicit map whose Jacobian is I + dt J_f, so its log-determinant can be
accumulated along the trajectory for exact density bookkeeping.  Higher
order integrators appear solely in the unweighted adaptive probe used to
diagnose temperature schedules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "TimeGrid",
    "FlowTrajectory",
    "ProbeResult",
    "StiffODEError",
    "euler_step",
    "run_flow",
    "adaptive_probe",
    "schedule_from_probe",
]

DIVERGENCE_CAP = 1e6
MAX_BISECTIONS = 6


class StiffODEError(RuntimeError):
    """Adaptive step size collapsed below the minimum."""

    def __init__(self, t):
        self.t = t
        super().__init__(f"stiff at t={t:.6g}: step size below minimum")


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing knots t_0 = 0 < ... < t_M = 1."""

    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("grid needs at least two knots")
        if k[0] != 0.0 or k[-1] != 1.0:
            raise ValueError("grid must start at 0 and end at 1")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", k)

    @property
    def steps(self):
        return np.diff(self.knots)

    def __len__(self):
        return self.knots.size - 1

    @classmethod
    def uniform(cls, m: int):
        return cls(np.linspace(0.0, 1.0, m + 1))

    @classmethod
    def power(cls, m: int, p: float):
        """Knots (n/M)^p: p > 1 concentrates steps near t = 0."""
        return cls(np.linspace(0.0, 1.0, m + 1) ** p)

    @classmethod
    def piecewise_linear(cls, breakpoints, m: int):
        """Grid whose knot density follows a piecewise-linear cumulative
        step-fraction curve given as (t, fraction) pairs."""
        bp = np.asarray(breakpoints, dtype=float)
        t, frac = bp[:, 0], bp[:, 1]
        levels = np.linspace(0.0, 1.0, m + 1)
        knots = np.interp(levels, frac, t)
        knots = np.maximum.accumulate(knots)
        # guard against flat stretches in the breakpoint curve
        for i in range(1, knots.size):
            if knots[i] <= knots[i - 1]:
                knots[i] = knots[i - 1] + 1e-12
        knots[0], knots[-1] = 0.0, 1.0
        return cls(knots)


@dataclass
class FlowTrajectory:
    """States and density bookkeeping of a batch of Euler flow trajectories.

    ``states`` has shape (M+1, N, d); ``step_logdet`` (M, N) holds
    log|det J| of each accepted step map; ``log_density`` (M+1, N) is the
    running log-density of the mapped samples, i.e. the initial log-density
    minus the accumulated log-determinants.  ``failed`` marks trajectories
    that diverged or lost monotonicity.
    """

    times: np.ndarray
    states: np.ndarray
    step_logdet: np.ndarray
    log_density: np.ndarray
    failed: np.ndarray
    failure_reason: dict = field(default_factory=dict)
    halvings: int = 0

    @property
    def terminal(self):
        return self.states[-1]

    @property
    def total_logdet(self):
        return self.step_logdet.sum(axis=0)


def _logdet_sign(jac, dt):
    """log|det(I + dt J)| and its sign for a batch of Jacobians (N, d, d)."""
    d = jac.shape[-1]
    step_jac = np.eye(d)[None, :, :] + dt * jac
    sign, logabs = np.linalg.slogdet(step_jac)
    return logabs, sign


def euler_step(field, x, t, dt, with_jacobian=True):
    """One forward-Euler map x -> x + dt f(x, t).

    Returns ``(x_next, logdet, sign)``; with ``with_jacobian=False`` the
    log-determinant is reported as zero with positive sign.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    ev = field(xb, t, with_jacobian=with_jacobian, dt=dt)
    x_next = xb + dt * ev.velocity
    if with_jacobian:
        logdet, sign = _logdet_sign(ev.jacobian, dt)
        bad = ~np.isfinite(ev.velocity).all(axis=1)
        logdet[bad] = np.nan
        sign[bad] = 0.0
    else:
        logdet = np.zeros(xb.shape[0])
        sign = np.where(np.isfinite(ev.velocity).all(axis=1), 1.0, 0.0)
    if single:
        return x_next[0], float(logdet[0]), float(sign[0])
    return x_next, logdet, sign


def _advance(field, x, t, dt, with_jacobian, depth, counter):
    """Advance a batch by dt, bisecting recursively on monotonicity loss.

    Returns (x_next, logdet, ok).  Entries that still fail after
    MAX_BISECTIONS levels are flagged not-ok.
    """
    ev = field(x, t, with_jacobian=with_jacobian, dt=dt)
    x_next = x + dt * ev.velocity
    finite = np.isfinite(x_next).all(axis=1)
    if with_jacobian:
        logdet = np.full(x.shape[0], np.nan)
        sign = np.zeros(x.shape[0])
        if finite.any():
            ld, sg = _logdet_sign(ev.jacobian[finite], dt)
            logdet[finite] = ld
            sign[finite] = sg
        ok = finite & (sign > 0) & np.isfinite(logdet)
    else:
        logdet = np.zeros(x.shape[0])
        ok = finite
    bad = ~ok
    if bad.any() and depth < MAX_BISECTIONS:
        counter[0] += 1
        xb = x[bad]
        h1, l1, ok1 = _advance(field, xb, t, dt / 2, with_jacobian, depth + 1, counter)
        fin = np.isfinite(h1).all(axis=1)
        h2 = np.full_like(h1, np.nan)
        l2 = np.zeros(l1.shape)
        ok2 = np.zeros(fin.shape, dtype=bool)
        if fin.any():
            h2f, l2f, ok2f = _advance(field, h1[fin], t + dt / 2, dt / 2,
                                      with_jacobian, depth + 1, counter)
            h2[fin] = h2f
            l2[fin] = l2f
            ok2[fin] = ok2f
        x_next[bad] = h2
        logdet[bad] = l1 + l2
        ok[bad] = ok1 & ok2
    return x_next, logdet, ok


def run_flow(field, grid: TimeGrid, x0, initial_log_density=None,
             with_jacobian=True) -> FlowTrajectory:
    """Compose Euler steps over the grid, tracking log-determinants.

    On a Jacobian-determinant sign change the offending step is bisected
    (up to MAX_BISECTIONS levels) and retried; trajectories that still fail,
    or whose state exceeds the divergence cap, are marked failed and frozen.
    """
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    x = (x0[None, :] if single else x0).copy()
    n, d = x.shape
    m = len(grid)
    states = np.empty((m + 1, n, d))
    states[0] = x
    step_logdet = np.zeros((m, n))
    logdens = np.zeros((m + 1, n))
    if initial_log_density is not None:
        logdens[0] = np.asarray(initial_log_density, dtype=float)
    failed = np.zeros(n, dtype=bool)
    reasons = {}
    counter = [0]

    for nstep in range(m):
        t, dt = grid.knots[nstep], grid.steps[nstep]
        active = ~failed
        if active.any():
            xn, ld, ok = _advance(field, x[active], t, dt, with_jacobian, 0, counter)
            idx = np.flatnonzero(active)
            diverged = ~np.isfinite(xn).all(axis=1) \
                | (np.abs(xn).max(axis=1) > DIVERGENCE_CAP)
            newly_bad = ~ok | diverged
            x[idx[~newly_bad]] = xn[~newly_bad]
            step_logdet[nstep, idx[~newly_bad]] = ld[~newly_bad]
            for j, div in zip(idx[newly_bad], diverged[newly_bad]):
                reasons[int(j)] = ("diverged", grid.knots[nstep + 1]) if div \
                    else ("monotonicity violation", grid.knots[nstep + 1])
            failed[idx[newly_bad]] = True
        states[nstep + 1] = x
        logdens[nstep + 1] = logdens[nstep] - step_logdet[nstep]

    logdens[:, failed] = -np.inf
    return FlowTrajectory(grid.knots.copy(), states, step_logdet, logdens,
                          failed, reasons, counter[0])


# ---------------------------------------------------------------------------
# Adaptive probe (unweighted; schedule diagnostics only)

# Cash-Karp embedded Runge-Kutta 4(5) tableau
_CK_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [3 / 10, -9 / 10, 6 / 5],
    [-11 / 54, 5 / 2, -70 / 27, 35 / 27],
    [1631 / 55296, 175 / 512, 575 / 13824, 44275 / 110592, 253 / 4096],
]
_CK_C = [0, 1 / 5, 3 / 10, 3 / 5, 1, 7 / 8]
_CK_B5 = [37 / 378, 0, 250 / 621, 125 / 594, 0, 512 / 1771]
_CK_B4 = [2825 / 27648, 0, 18575 / 48384, 13525 / 55296, 277 / 14336, 1 / 4]


@dataclass
class ProbeResult:
    """Accepted times and step sizes of one adaptive integration."""

    times: np.ndarray       # accepted step end times, (K,)
    step_sizes: np.ndarray  # accepted step sizes, (K,)
    terminal: np.ndarray

    def cumulative_fraction(self, t):
        """Fraction of accepted steps completed by time t (0 at t=0)."""
        t = np.asarray(t, dtype=float)
        counts = np.searchsorted(self.times, t, side="right")
        return counts / self.times.size


def adaptive_probe(field, x0, tol, max_step=0.05, min_step=1e-8) -> ProbeResult:
    """Integrate the flow with an embedded RK4(5) scheme, recording the
    accepted step sizes.  No Jacobians are computed.

    Accepted steps cluster where the velocity field varies quickly; a well
    chosen temperature schedule makes them near-equispaced on [0, 1].
    """
    x = np.asarray(x0, dtype=float).copy()
    t = 0.0
    dt = min(max_step, 1e-3)
    times, sizes = [], []

    def rhs(xv, tv):
        ev = field(xv[None, :], min(tv, 1.0), with_jacobian=False)
        return ev.velocity[0]

    while t < 1.0:
        dt = min(dt, 1.0 - t, max_step)
        if dt < min_step:
            raise StiffODEError(t)
        k = []
        bad = False
        for s in range(6):
            xs = x.copy()
            for j, a in enumerate(_CK_A[s]):
                xs = xs + dt * a * k[j]
            if not np.all(np.isfinite(xs)):
                bad = True
                break
            ki = rhs(xs, t + _CK_C[s] * dt)
            if not np.all(np.isfinite(ki)):
                bad = True
                break
            k.append(ki)
        if bad:
            dt *= 0.5
            continue
        x5 = x + dt * sum(b * ki for b, ki in zip(_CK_B5, k))
        x4 = x + dt * sum(b * ki for b, ki in zip(_CK_B4, k))
        err = float(np.max(np.abs(x5 - x4)))
        if err <= tol or dt <= min_step * 2:
            t += dt
            x = x5
            times.append(t)
            sizes.append(dt)
            factor = 5.0 if err == 0 else min(5.0, 0.9 * (tol / err) ** 0.2)
            dt *= max(factor, 1.0)
        else:
            dt *= max(0.2, 0.9 * (tol / err) ** 0.25)
    return ProbeResult(np.asarray(times), np.asarray(sizes), x)


def schedule_from_probe(probes, m: int) -> TimeGrid:
    """Piecewise-linear grid whose knot density follows the median of the
    probes' cumulative accepted-step curves."""
    if not probes:
        raise ValueError("need at least one probe")
    tgrid = np.linspace(0.0, 1.0, 2049)
    fracs = np.stack([p.cumulative_fraction(tgrid) for p in probes])
    med = np.median(fracs, axis=0)
    med = np.maximum.accumulate(med)
    med[0], med[-1] = 0.0, 1.0
    # strictly increasing for inversion
    med = med + np.linspace(0, 1e-9, med.size)
    med /= med[-1]
    bp = np.stack([tgrid, med], axis=-1)
    return TimeGrid.piecewise_linear(bp, m)
