import numpy as np
import pytest

from gibbsflow.integrator import TimeGrid
from gibbsflow.model import (TargetModel, TemperedPath, gaussian_target,
                             linear_schedule)
from gibbsflow.quadrature import QuadratureRule
from gibbsflow.smc import (EnsembleDiedError, KernelConfig, ParticleEnsemble,
                           SamplerSettings, ais_weight_update, conditional_smc,
                           ess, flow_weight_update, mala_move,
                           path_sampling_logz, resample, run_sampler,
                           rwmh_move, stream_rng, tempered_problem,
                           truncated_problem)
from gibbsflow.targets import TruncatedGaussianTarget, default_truncation_schedule
from gibbsflow.velocity import gibbs_field

LIN = linear_schedule()


def scalar_path():
    return TemperedPath(gaussian_target(0.0, 1.0, 1.0, 0.0), LIN)


def constant_likelihood_path(c):
    model = gaussian_target(0.0, 1.0, 1.0, 0.0)
    const = TargetModel(
        1, model.log_prior,
        lambda x: np.full(np.asarray(x).shape[:-1], np.log(c)),
        model.grad_log_prior, lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        support=model.support, integration_box=model.integration_box)
    return TemperedPath(const, LIN)


# --- ESS and ensembles -------------------------------------------------------


def test_ess_uniform():
    assert ess(np.full(4, 0.25)) == pytest.approx(4.0)


def test_ess_degenerate():
    assert ess(np.array([0.0, 1.0, 0.0])) == pytest.approx(1.0)


def test_ess_half():
    assert ess(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(2.0)


def test_ess_dead_ensemble():
    with pytest.raises(EnsembleDiedError):
        ess(np.zeros(3))
    ens = ParticleEnsemble(np.zeros((3, 1)), np.full(3, -np.inf))
    with pytest.raises(EnsembleDiedError):
        ens.normalized_weights()


def test_normalized_weights_sum_to_one():
    rng = np.random.default_rng(0)
    ens = ParticleEnsemble(np.zeros((100, 1)), rng.normal(0, 5, 100))
    w = ens.normalized_weights()
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert 1.0 <= ens.ess() <= 100.0


def test_stream_rng_deterministic_and_keyed():
    a = stream_rng(7, 1, 2).random(4)
    b = stream_rng(7, 1, 2).random(4)
    c = stream_rng(7, 1, 3).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# --- resampling --------------------------------------------------------------


def test_systematic_uniform_is_permutation():
    n = 16
    ens = ParticleEnsemble(np.arange(n, dtype=float)[:, None], np.zeros(n))
    out = resample(ens, "systematic", stream_rng(1, 0))
    assert sorted(out.positions[:, 0]) == list(range(n))
    assert np.allclose(out.log_weights, 0.0)
    assert len(out.ancestry) == 1


def test_degenerate_weights_clone_single_particle():
    lw = np.full(8, -np.inf)
    lw[3] = 0.0
    ens = ParticleEnsemble(np.arange(8, dtype=float)[:, None], lw)
    out = resample(ens, "multinomial", stream_rng(2, 0))
    assert np.all(out.positions[:, 0] == 3.0)


def test_multinomial_offspring_counts():
    # two particles with weights 0.75/0.25, n offspring
    n = 10_000
    lw = np.log(np.array([0.75, 0.25]))
    ens = ParticleEnsemble(np.array([[0.0], [1.0]]), lw)
    w = ens.normalized_weights()
    rng = stream_rng(3, 0)
    from gibbsflow.smc import _multinomial_indices
    idx = _multinomial_indices(w, n, rng)
    count0 = np.sum(idx == 0)
    # binomial sd sqrt(n * 0.75 * 0.25) ~ 43.3
    assert abs(count0 - 7500) < 3 * 43.3


def test_resample_preserves_logz():
    ens = ParticleEnsemble(np.zeros((4, 1)), np.array([0.0, -1.0, -2.0, -3.0]),
                           log_z=1.234)
    out = resample(ens, "systematic", stream_rng(4, 0))
    assert out.log_z == 1.234


def test_unknown_scheme_rejected():
    ens = ParticleEnsemble(np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        resample(ens, "stratified", stream_rng(0, 0))


# --- weight updates ----------------------------------------------------------


def test_ais_update_no_temperature_change():
    path = scalar_path()
    ens = ParticleEnsemble(np.array([[0.5], [1.0]]), np.array([0.1, -0.3]))
    out = ais_weight_update(ens, path, 0.4, 0.4)
    assert np.allclose(out.log_weights, ens.log_weights)
    assert out.log_z == pytest.approx(0.0)


def test_ais_update_constant_likelihood_exact():
    path = constant_likelihood_path(2.5)
    ens = ParticleEnsemble(np.random.default_rng(0).normal(0, 1, (50, 1)),
                           np.zeros(50))
    out = ais_weight_update(ens, path, 0.2, 0.7)
    assert out.log_z == pytest.approx(0.5 * np.log(2.5), abs=1e-12)


def test_ais_single_step_gaussian_integral():
    path = scalar_path()
    n = 100_000
    x = stream_rng(5, 0).normal(0, 1, (n, 1))
    ens = ParticleEnsemble(x, np.zeros(n))
    out = ais_weight_update(ens, path, 0.0, 1.0)
    z = np.exp(out.log_z)
    # var of exp(-x^2/2) under N(0,1) is 1/sqrt(3) - 1/2
    se = np.sqrt((1 / np.sqrt(3) - 0.5) / n)
    assert abs(z - 1 / np.sqrt(2)) < 3 * se


def test_flow_update_identity_map():
    path = scalar_path()
    problem = tempered_problem(path, None)
    x = np.array([[0.3], [0.9]])
    ens = ParticleEnsemble(x, np.array([0.2, -0.1]))
    out = flow_weight_update(ens, problem.log_gamma, 0.5, 0.5, x, x,
                             np.zeros(2))
    assert np.allclose(out.log_weights, ens.log_weights)


def test_flow_update_failed_particle():
    path = scalar_path()
    problem = tempered_problem(path, None)
    x = np.array([[0.3], [0.9]])
    ens = ParticleEnsemble(x, np.zeros(2))
    out = flow_weight_update(ens, problem.log_gamma, 0.4, 0.5, x, x,
                             np.zeros(2), failed=np.array([False, True]))
    w = out.normalized_weights()
    assert w[0] == pytest.approx(1.0)
    assert w[1] == 0.0


def test_flow_telescoping_constant_weights():
    # exact transport on a fine grid: every particle carries the same weight
    # and the product of increments is Z(1)/Z(0)
    path = scalar_path()
    field = gibbs_field(path, QuadratureRule("simpson", 51))

    def sample_initial(rng, n):
        return rng.normal(0, 1, (n, 1))

    problem = tempered_problem(path, sample_initial, field)
    settings = SamplerSettings("flow", 64, TimeGrid.uniform(200),
                               resample_threshold=0.0, seed=9)
    res = run_sampler(problem, settings)
    w = res.ensemble.normalized_weights()
    assert np.all(np.abs(w - 1 / 64) < 0.02 / 64)
    assert np.exp(res.log_z) == pytest.approx(1 / np.sqrt(2), rel=0.02)


# --- MCMC kernels ------------------------------------------------------------


def std_normal_logdens(x):
    return -0.5 * np.sum(np.asarray(x) ** 2, axis=-1)


def std_normal_grad(x):
    return -np.asarray(x, dtype=float)


def test_rwmh_tiny_step_always_accepts():
    cfg = KernelConfig(kind="rwmh", step_scale=1e-8)
    x = stream_rng(6, 0).normal(0, 1, (500, 2))
    _, acc = rwmh_move(x, std_normal_logdens, cfg, stream_rng(6, 1))
    assert acc.mean() > 0.999


def test_rwmh_rejects_zero_density_proposals():
    def logdens(x):
        return np.where(x[:, 0] > 0, 0.0, -np.inf)

    cfg = KernelConfig(kind="rwmh", step_scale=100.0)
    x = np.full((200, 1), 0.01)
    out, acc = rwmh_move(x, logdens, cfg, stream_rng(7, 0))
    assert np.all(out[:, 0] > 0)


def test_rwmh_invariance_of_moments():
    cfg = KernelConfig(kind="rwmh", step_scale=2.4)
    rng = stream_rng(8, 0)
    x = rng.normal(0, 1, (2000, 1))
    for k in range(30):
        x, _ = rwmh_move(x, std_normal_logdens, cfg, stream_rng(8, k + 1))
    se_mean = 1 / np.sqrt(2000)
    assert abs(x.mean()) < 3 * se_mean
    assert abs(x.var() - 1.0) < 3 * np.sqrt(2 / 2000) + 0.05


def test_mala_tiny_step_always_accepts():
    cfg = KernelConfig(kind="mala", step_scale=1e-6)
    x = stream_rng(9, 0).normal(0, 1, (500, 2))
    _, acc = mala_move(x, std_normal_logdens, std_normal_grad, cfg,
                       stream_rng(9, 1))
    assert acc.mean() > 0.999


def test_mala_zero_gradient_matches_rwmh_acceptance_rule():
    cfg = KernelConfig(kind="mala", step_scale=0.8)

    def zero_grad(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    x = stream_rng(10, 0).normal(0, 1, (400, 1))
    out_m, acc_m = mala_move(x, std_normal_logdens, zero_grad, cfg,
                             stream_rng(10, 1))
    cfg_r = KernelConfig(kind="rwmh", step_scale=0.8)
    out_r, acc_r = rwmh_move(x, std_normal_logdens, cfg_r, stream_rng(10, 1))
    assert np.array_equal(acc_m, acc_r)
    assert np.allclose(out_m, out_r)


def test_mala_invariance_of_mean():
    cfg = KernelConfig(kind="mala", step_scale=1.2)
    x = stream_rng(11, 0).normal(0, 1, (2000, 1))
    for k in range(30):
        x, _ = mala_move(x, std_normal_logdens, std_normal_grad, cfg,
                         stream_rng(11, k + 1))
    assert abs(x.mean()) < 3 / np.sqrt(2000)


def test_kernel_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(kind="hmc")
    with pytest.raises(ValueError):
        KernelConfig(step_scale=-1.0)


# --- path sampling -----------------------------------------------------------


def test_path_sampling_constant_likelihood():
    grid = TimeGrid.uniform(20)
    i_hat = np.full(21, np.log(3.0))
    assert path_sampling_logz(i_hat, grid, LIN) == pytest.approx(np.log(3.0))


def test_path_sampling_scalar_gaussian():
    grid = TimeGrid.uniform(200)
    i_hat = -1.0 / (2 * (1 + grid.knots))
    got = path_sampling_logz(i_hat, grid, LIN)
    assert got == pytest.approx(-0.5 * np.log(2.0), abs=1e-4)


def test_path_sampling_zero_integrand():
    grid = TimeGrid.uniform(10)
    assert path_sampling_logz(np.zeros(11), grid, LIN) == 0.0


# --- sampler driver ----------------------------------------------------------


def test_run_sampler_ais_scalar_gaussian():
    path = scalar_path()

    def sample_initial(rng, n):
        return rng.normal(0, 1, (n, 1))

    problem = tempered_problem(path, sample_initial)
    settings = SamplerSettings("ais", 512, TimeGrid.uniform(20),
                               kernel=KernelConfig(moves=2), seed=3)
    res = run_sampler(problem, settings)
    assert np.all((res.ess_trace >= 1) & (res.ess_trace <= 512))
    assert np.exp(res.log_z) == pytest.approx(1 / np.sqrt(2), rel=0.05)
    # path-sampling estimate agrees with the analytic integral
    ps = res.path_sampling_log_z(LIN)
    assert ps == pytest.approx(-0.5 * np.log(2.0), abs=0.02)


def test_run_sampler_deterministic_in_seed():
    path = scalar_path()

    def sample_initial(rng, n):
        return rng.normal(0, 1, (n, 1))

    problem = tempered_problem(path, sample_initial)

    def run(seed):
        s = SamplerSettings("ais", 64, TimeGrid.uniform(10),
                            kernel=KernelConfig(moves=1), seed=seed)
        return run_sampler(problem, s)

    a, b, c = run(5), run(5), run(6)
    assert np.array_equal(a.ensemble.positions, b.ensemble.positions)
    assert a.log_z == b.log_z
    assert a.log_z != c.log_z


def test_run_sampler_transport_needs_field():
    path = scalar_path()
    problem = tempered_problem(path, lambda rng, n: rng.normal(0, 1, (n, 1)))
    settings = SamplerSettings("flow", 8, TimeGrid.uniform(5))
    with pytest.raises(ValueError):
        run_sampler(problem, settings)


def test_settings_validation():
    with pytest.raises(ValueError):
        SamplerSettings("mcmc", 8, TimeGrid.uniform(5))


# --- conditional SMC ---------------------------------------------------------


def half_line_problem(points=21):
    target = TruncatedGaussianTarget(np.zeros(1), np.eye(1),
                                     np.zeros(1), np.full(1, np.inf))
    sched = default_truncation_schedule(target)
    return truncated_problem(target, sched, QuadratureRule("simpson", points))


def test_conditional_smc_single_particle_returns_reference():
    problem = half_line_problem()
    grid = TimeGrid.uniform(5)
    settings = SamplerSettings("gibbs_ais", 1, grid,
                               kernel=KernelConfig(moves=0),
                               resample_threshold=0.0, seed=0)
    ref = np.full((6, 1), 0.7)
    new_ref, sample, _ = conditional_smc(ref, problem, settings, seed=1)
    assert np.allclose(new_ref, ref)
    assert sample[0] == pytest.approx(0.7)


def test_conditional_smc_uniform_weights_pick_any():
    # constant-likelihood tempered path: all particles equally weighted
    path = constant_likelihood_path(1.0)
    field_path = gibbs_field(path, QuadratureRule("simpson", 11))
    problem = tempered_problem(path, lambda rng, n: rng.normal(0, 1, (n, 1)),
                               field_path)
    grid = TimeGrid.uniform(2)
    settings = SamplerSettings("gibbs_ais", 16, grid,
                               kernel=KernelConfig(moves=0),
                               resample_threshold=0.0, seed=0)
    picks = set()
    for seed in range(25):
        _, sample, ens = conditional_smc(None, problem, settings, seed=seed)
        w = ens.normalized_weights()
        assert np.allclose(w, 1 / 16, atol=1e-10)
        picks.add(round(float(sample[0]), 6))
    assert len(picks) > 10  # selection is not stuck on one index


def test_conditional_smc_half_line_mean():
    problem = half_line_problem()
    grid = TimeGrid.uniform(10)
    settings = SamplerSettings("gibbs_ais", 8, grid,
                               kernel=KernelConfig(moves=1, step_scale=1.0,
                                                   autotune=False),
                               resample_threshold=0.5, seed=0)
    ref = None
    draws = []
    n_sweeps = 600
    for sweep in range(n_sweeps):
        ref, sample, _ = conditional_smc(ref, problem, settings,
                                         seed=1000 + sweep)
        draws.append(sample[0])
    draws = np.asarray(draws[50:])
    # batch-means standard error to account for sweep-to-sweep correlation
    nb = 22
    batches = draws[:nb * (draws.size // nb)].reshape(nb, -1).mean(axis=1)
    se = batches.std(ddof=1) / np.sqrt(nb)
    assert abs(draws.mean() - np.sqrt(2 / np.pi)) < 4 * se + 0.01


def test_conditional_smc_reference_shape_checked():
    problem = half_line_problem()
    settings = SamplerSettings("gibbs_ais", 4, TimeGrid.uniform(5),
                               kernel=KernelConfig(moves=0), seed=0)
    with pytest.raises(ValueError):
        conditional_smc(np.zeros((3, 1)), problem, settings, seed=0)
