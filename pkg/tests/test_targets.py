import itertools

import numpy as np
import pytest

from gibbsflow.targets import (BENCHMARK_SEED, BENCHMARK_SIGMA,
                               BENCHMARK_TRUE_MEANS, MixtureModel,
                               TruncatedGaussianTarget, assign_mode,
                               benchmark_mixture, default_truncation_schedule,
                               equicorrelated, generate_mixture_data,
                               load_benchmark_observations)


def test_generate_mixture_data_stratified():
    obs = generate_mixture_data(BENCHMARK_TRUE_MEANS, BENCHMARK_SIGMA, 100,
                                BENCHMARK_SEED)
    assert obs.shape == (100,)
    block = obs[:25]
    assert abs(block.mean() - (-3.0)) < 3 * BENCHMARK_SIGMA / np.sqrt(25)


def test_generate_mixture_data_one_per_component():
    obs = generate_mixture_data((-3.0, 0.0, 3.0, 6.0), 0.55, 4, 1)
    assert obs.shape == (4,)


def test_generate_mixture_data_zero_noise():
    obs = generate_mixture_data((-3.0, 0.0, 3.0, 6.0), 0.0, 8, 1)
    assert np.array_equal(obs, np.repeat([-3.0, 0.0, 3.0, 6.0], 2))


def test_generate_mixture_data_divisibility():
    with pytest.raises(ValueError):
        generate_mixture_data((-3.0, 0.0, 3.0, 6.0), 0.55, 10, 1)


def test_shipped_dataset_reproducible():
    shipped = load_benchmark_observations()
    regenerated = generate_mixture_data(BENCHMARK_TRUE_MEANS, BENCHMARK_SIGMA,
                                        100, BENCHMARK_SEED)
    assert np.array_equal(shipped, regenerated)


def test_mixture_likelihood_permutation_symmetry():
    mix = benchmark_mixture()
    rng = np.random.default_rng(0)
    x = rng.uniform(-5, 7, 4)
    base = mix.log_likelihood(x)
    for perm in itertools.permutations(range(4)):
        assert mix.log_likelihood(x[list(perm)]) == pytest.approx(base, abs=1e-10)


def test_mixture_mode_dominates_shifted_point():
    mix = benchmark_mixture()
    x_star = np.asarray(BENCHMARK_TRUE_MEANS)
    assert mix.log_likelihood(x_star) > mix.log_likelihood(x_star + 5.0)


def test_mixture_gradient_matches_fd():
    mix = benchmark_mixture()
    rng = np.random.default_rng(1)
    x = np.asarray(BENCHMARK_TRUE_MEANS) + rng.normal(0, 0.3, 4)
    eps = 1e-6
    fd = np.empty(4)
    for i in range(4):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        fd[i] = (mix.log_likelihood(hi) - mix.log_likelihood(lo)) / (2 * eps)
    assert np.allclose(mix.grad_log_likelihood(x), fd, rtol=1e-5, atol=1e-6)


def test_mixture_prior_box():
    mix = benchmark_mixture()
    assert np.isfinite(mix.log_prior(np.zeros(4)))
    assert mix.log_prior(np.array([11.0, 0, 0, 0])) == -np.inf


def test_assign_mode_identity():
    x_star = np.asarray(BENCHMARK_TRUE_MEANS)
    assert assign_mode(x_star, x_star) == 0


def test_assign_mode_transposition():
    x_star = np.asarray(BENCHMARK_TRUE_MEANS)
    swapped = x_star[[1, 0, 2, 3]]
    perms = list(itertools.permutations(range(4)))
    assert perms[assign_mode(swapped, x_star)] == (1, 0, 2, 3)


def test_assign_mode_noisy_identity():
    x_star = np.asarray(BENCHMARK_TRUE_MEANS)
    assert assign_mode(np.array([-2.9, 0.1, 3.2, 5.8]), x_star) == 0


def test_assign_mode_equivariance_d3():
    means = np.array([-2.0, 0.0, 2.0])
    perms = list(itertools.permutations(range(3)))
    rng = np.random.default_rng(2)
    x = means + rng.normal(0, 0.2, 3)
    base = perms[assign_mode(x, means)]
    for p in perms:
        shuffled = perms[assign_mode(x[list(p)], means)]
        # permuting the point permutes the assigned labelling the same way
        assert tuple(base[p[i]] for i in range(3)) == shuffled


def test_equicorrelated_validation():
    sigma = equicorrelated(4, 0.5)
    assert np.allclose(np.diag(sigma), 1.0)
    assert sigma[0, 1] == 0.5
    np.linalg.cholesky(sigma)
    with pytest.raises(ValueError):
        equicorrelated(4, -0.5)
    with pytest.raises(ValueError):
        equicorrelated(4, 1.0)


def test_truncated_target_validation():
    with pytest.raises(ValueError):
        TruncatedGaussianTarget(np.zeros(2), np.eye(2),
                                np.array([0.0, 1.0]), np.array([1.0, 0.5]))
    with pytest.raises(np.linalg.LinAlgError):
        TruncatedGaussianTarget(np.zeros(2), -np.eye(2),
                                np.zeros(2), np.ones(2))


def test_orthant_mean_pattern():
    tg = TruncatedGaussianTarget.orthant(4, 0.25, 2.0)
    assert np.array_equal(tg.mu, [-2.0, -2.0, 2.0, 2.0])
    assert np.all(tg.lower == 0.0)
    assert np.all(np.isinf(tg.upper))


def test_default_schedule_values():
    tg = TruncatedGaussianTarget.orthant(2, 0.0, 1.0)
    sched = default_truncation_schedule(tg)
    assert np.allclose(sched.alpha(1.0), 0.0)
    assert np.allclose(sched.alpha(0.5), -1.0)
    # deep past the clip: alpha pinned to mu - 8 sd
    assert np.allclose(sched.alpha(1e-3), tg.mu - 8.0)
    assert np.allclose(sched.dalpha(1e-3), 0.0)


def test_default_schedule_monotone():
    tg = TruncatedGaussianTarget.orthant(2, 0.5, 1.0)
    sched = default_truncation_schedule(tg)
    grid = np.linspace(0.01, 1.0, 100)
    alphas = np.stack([sched.alpha(t) for t in grid])
    betas = np.stack([sched.beta(t) for t in grid])
    assert np.all(np.diff(alphas, axis=0) >= 0)
    assert np.all(np.diff(betas, axis=0) <= 0)
    assert np.all(alphas < betas)


def test_default_schedule_requires_orthant():
    tg = TruncatedGaussianTarget(np.zeros(2), np.eye(2),
                                 np.full(2, -1.0), np.full(2, 1.0))
    with pytest.raises(ValueError):
        default_truncation_schedule(tg)
