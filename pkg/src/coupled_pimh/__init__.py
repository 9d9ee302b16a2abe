"""Unbiased smoothing, filtering and posterior estimation with coupled PIMH."""

from .coupled import (
    CoupledRunRecord,
    CouplingInvariantError,
    EstimatorRequest,
    FilteringResult,
    ParticleFilterSource,
    ProposalSource,
    h_km_combine,
    pimh_accept,
    run_coupled_pimh,
    run_pimh,
    unbiased_filtering,
)
from .estimators import SigmaTuner, UnbiasedFilter, UnbiasedPosterior, UnbiasedSmoother
from .harness import ExperimentConfig, aggregate, run_experiment, run_replicates, survival_curve
from .large_sample import (
    alpha_sigma,
    estimate_sigma,
    expected_tau,
    iact,
    recommend_n,
    tau_one_closed,
    tau_pmf,
    tau_survival,
)
from .models import (
    KineticModel,
    KineticParams,
    LinearGaussianModel,
    LinearGaussianParams,
    ObservationSeries,
    StateSpaceModel,
    SvModel,
    SvParams,
    build_model,
    gillespie_step,
    kalman_oracle,
    simulate_ssm,
    sv_obs_logdensity,
    sv_transition,
)
from .particle_filter import ParticleCloud, run_pf, run_pf_batch
from .smc_sampler import (
    MixtureTarget,
    SmcSamplerSource,
    TemperedTarget,
    mixture_loglik,
    run_smc_sampler,
    rw_mh_move,
    tempering_schedule,
)

__version__ = "0.1.0"
