"""Batch experiment driver.

Subcommands: ``run`` (annealed sampler with per-step traces), ``schedule``
(adaptive-probe diagnostic of the temperature schedule), ``zest``
(normalizing-constant replication study) and ``demo-divergence`` (blow-up of
the coupled anti-derivative flow versus well-behaved reference flows).

Each experiment cell writes a CSV with versioned headers, a JSON summary and
rendered figures into its own subdirectory of the output directory.  Results
are deterministic for a fixed seed regardless of the thread count.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import reference
from .integrator import StiffODEError, TimeGrid, adaptive_probe
from .model import TemperatureSchedule, linear_schedule, power_schedule
from .quadrature import QuadratureRule
from .smc import (EnsembleDiedError, KernelConfig, SamplerSettings,
                  run_sampler, stream_rng, tempered_problem,
                  truncated_problem)
from .targets import (TruncatedGaussianTarget, benchmark_mixture,
                      default_truncation_schedule)
from .velocity import gibbs_field

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

RUN_SCHEMA = "run-v1"
ZEST_SCHEMA = "zest-v1"
SCHEDULE_SCHEMA = "schedule-v1"
DIVERGENCE_SCHEMA = "divergence-v1"


class ConfigError(ValueError):
    pass


def _check_keys(block, allowed, where):
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, {"model", "schedule", "grid", "sampler", "kernel",
                      "quadrature", "seed", "replications", "output",
                      "probe"}, "config")
    return cfg


def _build_schedule(spec) -> TemperatureSchedule:
    spec = dict(spec or {"name": "linear"})
    _check_keys(spec, {"name", "p"}, "schedule")
    name = spec.get("name", "linear")
    if name == "linear":
        return linear_schedule()
    if name == "power":
        return power_schedule(float(spec.get("p", 2)))
    raise ConfigError(f"unknown schedule {name!r}")


def _build_grid(spec) -> TimeGrid:
    spec = dict(spec or {})
    _check_keys(spec, {"kind", "steps", "p", "knots"}, "grid")
    kind = spec.get("kind", "uniform")
    m = int(spec.get("steps", 50))
    if kind == "uniform":
        return TimeGrid.uniform(m)
    if kind == "power":
        return TimeGrid.power(m, float(spec.get("p", 2)))
    if kind == "explicit":
        return TimeGrid(np.asarray(spec["knots"], dtype=float))
    raise ConfigError(f"unknown grid kind {kind!r}")


def _build_rule(spec) -> QuadratureRule:
    spec = dict(spec or {})
    _check_keys(spec, {"kind", "points"}, "quadrature")
    return QuadratureRule(spec.get("kind", "simpson"),
                          int(spec.get("points", 51)))


def _build_kernel(spec):
    if spec is None:
        return None
    spec = dict(spec)
    _check_keys(spec, {"kind", "step_scale", "moves", "autotune"}, "kernel")
    return KernelConfig(kind=spec.get("kind", "rwmh"),
                        step_scale=float(spec.get("step_scale", 0.5)),
                        moves=int(spec.get("moves", 5)),
                        autotune=bool(spec.get("autotune", True)))


def _sweep_cells(model_spec):
    """Expand list-valued truncated-Gaussian parameters into a run matrix."""
    sweep_keys = [k for k in ("rho", "xi", "d")
                  if isinstance(model_spec.get(k), list)]
    if not sweep_keys:
        return [model_spec]
    axes = [model_spec[k] for k in sweep_keys]
    cells = []
    for combo in itertools.product(*axes):
        cell = dict(model_spec)
        cell.update(dict(zip(sweep_keys, combo)))
        cells.append(cell)
    return cells


def _build_problem(model_spec, schedule, rule):
    spec = dict(model_spec)
    name = spec.pop("name", None)
    if name == "mixture":
        _check_keys(spec, set(), "model.mixture")
        mix = benchmark_mixture()
        path = mix.tempered_path(schedule)
        field = gibbs_field(path, rule)
        box = mix.target_model().integration_box

        def sample_initial(rng, n):
            return rng.uniform(box[:, 0], box[:, 1], size=(n, box.shape[0]))

        return tempered_problem(path, sample_initial, field), "mixture"
    if name == "truncated_gaussian":
        _check_keys(spec, {"d", "rho", "xi"}, "model.truncated_gaussian")
        d = int(spec.get("d", 2))
        rho = float(spec.get("rho", 0.0))
        xi = float(spec.get("xi", 0.0))
        target = TruncatedGaussianTarget.orthant(d, rho, xi)
        sched = default_truncation_schedule(target)
        tag = f"truncated_d{d}_rho{rho:g}_xi{xi:g}"
        return truncated_problem(target, sched, rule), tag
    raise ConfigError(f"unknown model {name!r}")


def _plan(cfg, args):
    schedule = _build_schedule(cfg.get("schedule"))
    grid = _build_grid(cfg.get("grid"))
    rule = _build_rule(cfg.get("quadrature"))
    kernel = _build_kernel(cfg.get("kernel"))
    sampler = dict(cfg.get("sampler") or {})
    _check_keys(sampler, {"scheme", "particles", "resample", "threshold"},
                "sampler")
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    reps = int(cfg.get("replications", 1))
    out = Path(args.out or cfg.get("output", "results"))
    cells = _sweep_cells(dict(cfg.get("model") or {}))
    return {
        "schedule": schedule, "grid": grid, "rule": rule, "kernel": kernel,
        "scheme": sampler.get("scheme", "gibbs_ais"),
        "particles": int(sampler.get("particles", 256)),
        "resample": sampler.get("resample", "systematic"),
        "threshold": float(sampler.get("threshold", 0.5)),
        "seed": seed, "reps": reps, "out": out, "cells": cells,
    }


def _threads(args):
    n = args.threads
    if n is None:
        n = int(os.environ.get("GIBBSFLOW_THREADS", "0"))
    n = int(n)
    if n == 0:
        n = os.cpu_count() or 1
    return max(n, 1)


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _one_replicate(plan, cell_spec, rep, seed):
    problem, _ = _build_problem(cell_spec, plan["schedule"], plan["rule"])
    kernel = plan["kernel"]
    if kernel is not None:
        kernel = KernelConfig(kind=kernel.kind, step_scale=kernel.step_scale,
                              moves=kernel.moves, autotune=kernel.autotune)
    settings = SamplerSettings(plan["scheme"], plan["particles"],
                               plan["grid"], kernel=kernel,
                               resample_scheme=plan["resample"],
                               resample_threshold=plan["threshold"],
                               seed=seed)
    try:
        res = run_sampler(problem, settings)
        return rep, res, None
    except EnsembleDiedError as exc:
        return rep, None, str(exc)


def _run_cells(plan, worker, n_threads):
    """Execute ``worker`` over all (cell, replicate) pairs deterministically.

    Replicate seeds derive from (base seed, cell index, replicate), so the
    thread count never affects results, only wall time.
    """
    jobs = []
    for ci, cell in enumerate(plan["cells"]):
        for rep in range(plan["reps"]):
            rep_seed = int(np.random.SeedSequence(
                entropy=plan["seed"], spawn_key=(ci, rep)).entropy
                + ci * 1_000_003 + rep)
            jobs.append((ci, cell, rep, rep_seed))
    results = {}
    if n_threads == 1:
        for ci, cell, rep, rep_seed in jobs:
            results[(ci, rep)] = worker(cell, rep, rep_seed)
    else:
        with concurrent.futures.ThreadPoolExecutor(n_threads) as pool:
            futs = {pool.submit(worker, cell, rep, rep_seed): (ci, rep)
                    for ci, cell, rep, rep_seed in jobs}
            for fut in concurrent.futures.as_completed(futs):
                results[futs[fut]] = fut.result()
    return results


def _cell_dir(plan, cell_spec):
    _, tag = _build_problem(cell_spec, plan["schedule"], plan["rule"])
    d = plan["out"] / tag
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_run(args):
    cfg = _load_config(args.config)
    plan = _plan(cfg, args)
    t_start = time.perf_counter()

    def worker(cell, rep, rep_seed):
        return _one_replicate(plan, cell, rep, rep_seed)

    results = _run_cells(plan, worker, _threads(args))

    for ci, cell in enumerate(plan["cells"]):
        cell_dir = _cell_dir(plan, cell)
        rows = []
        finals = []
        died = []
        evals = 0
        for rep in range(plan["reps"]):
            _, res, err = results[(ci, rep)]
            if res is None:
                died.append({"replicate": rep, "error": err})
                continue
            evals += res.eval_cost
            for s in range(len(res.ess_trace)):
                rows.append((RUN_SCHEMA, rep, s + 1, res.times[s + 1],
                             res.ess_trace[s], res.logz_trace[s],
                             res.acceptance_trace[s],
                             int(res.resampled[s])))
            finals.append({"replicate": rep,
                           "final_ess": float(res.ess_trace[-1]),
                           "logz": float(res.log_z),
                           "failed_particles": int(res.n_failed)})
        _write_csv(cell_dir / "trace.csv",
                   ["schema", "replicate", "step", "t", "ess", "logz",
                    "acceptance", "resampled"], rows)
        summary = {
            "schema": RUN_SCHEMA,
            "seed": plan["seed"],
            "replicates": finals,
            "ensemble_died": died,
            "wall_time_s": time.perf_counter() - t_start,
            "model_evaluations": evals,
        }
        with open(cell_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
        _render_run_figures(cell_dir, plan, results, ci)
    return EXIT_OK


def _render_run_figures(cell_dir, plan, results, ci):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for rep in range(plan["reps"]):
        _, res, _ = results[(ci, rep)]
        if res is None:
            continue
        ax1.plot(res.times[1:], res.ess_trace, alpha=0.6, lw=0.8)
        ax2.plot(res.times[1:], res.logz_trace, alpha=0.6, lw=0.8)
    ax1.set_xlabel("t")
    ax1.set_ylabel("ESS")
    ax2.set_xlabel("t")
    ax2.set_ylabel("log Z estimate")
    fig.tight_layout()
    fig.savefig(cell_dir / "traces.png", dpi=120)
    plt.close(fig)


def cmd_zest(args):
    cfg = _load_config(args.config)
    plan = _plan(cfg, args)
    t_start = time.perf_counter()

    def worker(cell, rep, rep_seed):
        return _one_replicate(plan, cell, rep, rep_seed)

    results = _run_cells(plan, worker, _threads(args))

    for ci, cell in enumerate(plan["cells"]):
        cell_dir = _cell_dir(plan, cell)
        rows = []
        logzs = []
        for rep in range(plan["reps"]):
            _, res, err = results[(ci, rep)]
            if res is None:
                rows.append((ZEST_SCHEMA, rep, "nan", "nan"))
                continue
            rows.append((ZEST_SCHEMA, rep, res.log_z,
                         float(res.ess_trace[-1])))
            logzs.append(res.log_z)
        _write_csv(cell_dir / "logz.csv",
                   ["schema", "replicate", "logz", "final_ess"], rows)
        z = np.exp(np.asarray(logzs)) if logzs else np.array([])
        summary = {
            "schema": ZEST_SCHEMA,
            "seed": plan["seed"],
            "replications": plan["reps"],
            "mean_z": float(z.mean()) if z.size else None,
            "se_z": float(z.std(ddof=1) / np.sqrt(z.size)) if z.size > 1 else None,
            "mean_logz": float(np.mean(logzs)) if logzs else None,
            "wall_time_s": time.perf_counter() - t_start,
        }
        with open(cell_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
        if z.size:
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.hist(z, bins=max(5, z.size // 10))
            ax.set_xlabel("exp(log Z)")
            ax.set_ylabel("count")
            fig.tight_layout()
            fig.savefig(cell_dir / "zest.png", dpi=120)
            plt.close(fig)
    return EXIT_OK


def cmd_schedule(args):
    cfg = _load_config(args.config)
    plan = _plan(cfg, args)
    probe_spec = dict(cfg.get("probe") or {})
    _check_keys(probe_spec, {"starts", "tol", "max_step"}, "probe")
    n_starts = int(probe_spec.get("starts", 10))
    tol = float(probe_spec.get("tol", 1e-3))
    max_step = float(probe_spec.get("max_step", 0.05))
    t_start = time.perf_counter()

    cell = plan["cells"][0]
    problem, _ = _build_problem(cell, plan["schedule"], plan["rule"])
    cell_dir = _cell_dir(plan, cell)

    def worker(cell_spec, rep, rep_seed):
        rng = stream_rng(rep_seed, 0xB0B)
        x0 = problem.sample_initial(rng, 1)[0]
        try:
            return adaptive_probe(problem.field, x0, tol, max_step=max_step)
        except StiffODEError as exc:
            return exc

    plan = dict(plan, reps=n_starts)
    results = _run_cells(plan, worker, _threads(args))

    rows = []
    sups = []
    tgrid = np.linspace(0.0, 1.0, 201)
    fig, ax = plt.subplots(figsize=(5, 4))
    for rep in range(n_starts):
        probe = results[(0, rep)]
        if isinstance(probe, StiffODEError):
            rows.append((SCHEDULE_SCHEMA, rep, "nan", "nan", "nan"))
            continue
        frac = probe.cumulative_fraction(tgrid)
        sups.append(float(np.max(np.abs(frac - tgrid))))
        for t, dt in zip(probe.times, probe.step_sizes):
            rows.append((SCHEDULE_SCHEMA, rep, t, dt,
                         probe.cumulative_fraction(t)))
        ax.plot(tgrid, frac, alpha=0.6, lw=0.8)
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("fraction of accepted steps")
    fig.tight_layout()
    fig.savefig(cell_dir / "schedule.png", dpi=120)
    plt.close(fig)
    _write_csv(cell_dir / "probe.csv",
               ["schema", "start", "t", "step_size", "cumulative_fraction"],
               rows)
    summary = {
        "schema": SCHEDULE_SCHEMA,
        "seed": plan["seed"],
        "starts": n_starts,
        "sup_distance_to_identity": sups,
        "median_sup_distance": float(np.median(sups)) if sups else None,
        "wall_time_s": time.perf_counter() - t_start,
    }
    with open(cell_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return EXIT_OK


def cmd_demo_divergence(args):
    out = Path(args.out or "results") / "divergence"
    out.mkdir(parents=True, exist_ok=True)
    gp = reference.GaussianPath(np.zeros(2), np.eye(2), np.eye(2), np.zeros(2))
    gp1 = reference.GaussianPath([0.0], [[1.0]], [[1.0]], [0.0])
    schedule = linear_schedule()
    start = np.array([3.0, 3.0])

    rows = []

    def integrate(name, rhs, x0):
        # fixed-step RK4 with blow-up detection; the anti-derivative field is
        # smooth until the trajectory escapes, so a fine fixed grid suffices
        x = np.asarray(x0, dtype=float).copy()
        m = 4000
        dt = 1.0 / m
        blow_at = None
        with np.errstate(all="ignore"):
            for k in range(m):
                t = k * dt
                k1 = rhs(x, t)
                k2 = rhs(x + dt / 2 * k1, t + dt / 2)
                k3 = rhs(x + dt / 2 * k2, t + dt / 2)
                k4 = rhs(x + dt * k3, t + dt)
                x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                norm = float(np.linalg.norm(np.atleast_1d(x)))
                blown = not np.isfinite(norm) or norm > 1e3
                if k % 40 == 0 or blown:
                    # overflow inside one step lands on nan; report it as inf
                    rows.append((DIVERGENCE_SCHEMA, name, t + dt,
                                 norm if np.isfinite(norm) else np.inf))
                if blown:
                    blow_at = t + dt
                    break
        return blow_at

    blow = integrate(
        "antiderivative",
        lambda x, t: reference.antiderivative_velocity(gp, 0.5, 0.5, x, t, schedule),
        start)
    integrate("minke",
              lambda x, t: reference.minke_velocity(gp, schedule, x, t), start)
    integrate("scalar",
              lambda x, t: reference.minke_velocity(gp1, schedule, np.atleast_1d(x), t),
              np.array([3.0]))
    _write_csv(out / "divergence.csv",
               ["schema", "flow", "t", "norm"], rows)
    summary = {
        "schema": DIVERGENCE_SCHEMA,
        "antiderivative_blowup_t": blow,
        "diverged": blow is not None and blow < 1.0,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)

    fig, ax = plt.subplots(figsize=(5, 4))
    by = {}
    for _, name, t, norm in rows:
        by.setdefault(name, []).append((t, norm))
    for name, pts in by.items():
        pts = np.asarray(pts)
        ax.semilogy(pts[:, 0], pts[:, 1], label=name)
    ax.set_xlabel("t")
    ax.set_ylabel("|x(t)|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "divergence.png", dpi=120)
    plt.close(fig)
    return EXIT_OK


def _build_parser():
    p = argparse.ArgumentParser(prog="gibbsflow",
                                description="Flow-transport Monte Carlo experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("schedule", cmd_schedule),
                     ("zest", cmd_zest), ("demo-divergence", cmd_demo_divergence)):
        sp = sub.add_parser(name)
        if name != "demo-divergence":
            sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.set_defaults(func=fn)
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure contract: exit code 3
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
