"""Approximate transport of particles along a tempered curve of measures.

The package builds velocity fields that track every full conditional of the
tempered density using one-dimensional quadrature, integrates the induced
flow with exact density bookkeeping, and embeds the resulting transport maps
into annealed importance sampling for normalizing-constant estimation.
"""

from .model import (
    SupportError,
    TargetModel,
    TemperatureSchedule,
    TemperedPath,
    gaussian_target,
    linear_schedule,
    power_schedule,
)
from .quadrature import QuadratureRule, IntegrandOverflowError, integrate
from .velocity import (
    TruncationSchedule,
    VelocityEvaluation,
    gibbs_field,
    gibbs_jacobian,
    gibbs_velocity,
    local_error,
    truncated_field,
    truncated_jacobian,
    truncated_velocity,
)
from .reference import (
    GaussianPath,
    antiderivative_velocity,
    gaussian_expected_loglik,
    gaussian_params,
    knothe_velocity_2d,
    minke_velocity,
    one_d_exact_map,
)
from .integrator import (
    FlowTrajectory,
    ProbeResult,
    StiffODEError,
    TimeGrid,
    adaptive_probe,
    euler_step,
    run_flow,
    schedule_from_probe,
)
from .smc import (
    EnsembleDiedError,
    FlowProblem,
    KernelConfig,
    ParticleEnsemble,
    SamplerResult,
    SamplerSettings,
    ais_weight_update,
    conditional_smc,
    ess,
    flow_weight_update,
    gibbs_ais_step,
    mala_move,
    path_sampling_logz,
    resample,
    run_sampler,
    rwmh_move,
    stream_rng,
    tempered_problem,
    truncated_problem,
)
from .targets import (
    MixtureModel,
    TruncatedGaussianTarget,
    assign_mode,
    benchmark_mixture,
    default_truncation_schedule,
    equicorrelated,
    generate_mixture_data,
    load_benchmark_observations,
)

__version__ = "0.1.0"
