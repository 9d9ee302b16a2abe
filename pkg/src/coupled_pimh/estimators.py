"""Estimator-style front end (``fit`` / ``get_params``) over the functional core.

Each estimator runs independent coupled-PIMH replicates on a fixed master
seed and stores the per-replicate unbiased estimates and their average.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .coupled import EstimatorRequest, ParticleFilterSource, run_coupled_pimh, unbiased_filtering
from .harness import aggregate, farm, path_test_function, point_test_function, survival_curve
from .large_sample import SIGMA_OPT, estimate_sigma, recommend_n
from .models import StateSpaceModel, build_model
from .particle_filter import SCHEMES
from .smc_sampler import MixtureTarget, SmcSamplerSource, TemperedTarget
from .validation import check_count, check_k_m, check_observations, check_positive, check_seed


def _resolve_model(model, model_params):
    if isinstance(model, StateSpaceModel):
        return model
    return build_model(model, model_params)


def _resolve_h(h, point=False):
    if callable(h):
        return h
    return point_test_function(h) if point else path_test_function(h)


class _CoupledMixin:
    def _store(self, results):
        ok = [r.value for r in results if r.ok]
        self.n_failed_ = len(results) - len(ok)
        if not ok:
            raise RuntimeError(f"all replicates failed; first error: {results[0].error}")
        self.records_ = ok
        self.estimates_ = np.array([r.estimate for r in ok])
        self.taus_ = np.array([r.tau for r in ok])
        self.pf_calls_ = np.array([r.pf_calls for r in ok])
        self.estimate_ = self.estimates_.mean(axis=0)
        if len(ok) >= 2:
            agg = aggregate(ok, getattr(self, "n_particles", None))
            self.variance_, self.se_ = agg.variance, agg.se
            self.aggregate_ = agg
        return self

    def survival(self):
        """Empirical ``P[tau >= n]`` table of the fitted runs."""
        return survival_curve(self.taus_)


class UnbiasedSmoother(_CoupledMixin, BaseEstimator):
    """Unbiased smoothing expectations ``E[h(X_{1:T}) | y_{1:T}]`` by coupled PIMH.

    Parameters
    ----------
    model : str or StateSpaceModel
        ``"ar1"``, ``"kinetic"``, ``"sv"`` or a model instance.
    model_params : dict, optional
        Parameters passed to the named model.
    n_particles : int
    h : str or callable
        Test function on trajectory stacks ``(n, T, d)``; names as in the CLI.
    k, m : int
        Burn-in and horizon of the time-averaged estimator.
    rao_blackwell : bool
        Average ``h`` over the whole weighted cloud instead of one drawn path.
    n_replicates : int
        Independent coupled runs averaged into ``estimate_``.
    random_state : int or None
        Master seed; replicate ``r`` uses its own derived stream.
    n_jobs : int
        Worker threads.

    Attributes
    ----------
    estimate_ : ndarray
        Average of the replicate estimates.
    estimates_, taus_, pf_calls_ : ndarray
        Per-replicate estimates, meeting times and proposal counts.
    variance_, se_ : ndarray
        Sample variance and standard error (when ``n_replicates >= 2``).
    """

    def __init__(self, model="ar1", model_params=None, n_particles=64, scheme="multinomial", h="sum_x", k=0, m=0,
                 rao_blackwell=False, n_replicates=100, random_state=None, n_jobs=1):
        self.model = model
        self.model_params = model_params
        self.n_particles = n_particles
        self.scheme = scheme
        self.h = h
        self.k = k
        self.m = m
        self.rao_blackwell = rao_blackwell
        self.n_replicates = n_replicates
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, y, X=None):
        obs = check_observations(y)
        check_count(self.n_particles, "n_particles")
        check_count(self.n_replicates, "n_replicates")
        k, m = check_k_m(self.k, self.m)
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        model = _resolve_model(self.model, self.model_params)
        source = ParticleFilterSource(model, obs, self.n_particles, self.scheme)
        request = EstimatorRequest(_resolve_h(self.h), k, m, bool(self.rao_blackwell))
        self.seed_ = check_seed(self.random_state)
        results = farm(lambda rng: run_coupled_pimh(source, request, rng), self.n_replicates, self.seed_, self.n_jobs)
        return self._store(results)


class UnbiasedFilter(BaseEstimator):
    """Unbiased filtering means ``E[h(X_{1:t}) | y_{1:t}]`` for every ``t``.

    ``h`` defaults to the last state, so ``filtering_mean_[t]`` estimates
    ``E[X_{t+1} | y_{1:t+1}]`` (zero-based rows).
    """

    def __init__(self, model="ar1", model_params=None, n_particles=64, scheme="multinomial", h=None, k=0, m=0,
                 n_replicates=100, random_state=None, n_jobs=1):
        self.model = model
        self.model_params = model_params
        self.n_particles = n_particles
        self.scheme = scheme
        self.h = h
        self.k = k
        self.m = m
        self.n_replicates = n_replicates
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, y, X=None):
        obs = check_observations(y)
        check_count(self.n_particles, "n_particles")
        check_count(self.n_replicates, "n_replicates")
        k, m = check_k_m(self.k, self.m)
        model = _resolve_model(self.model, self.model_params)
        source = ParticleFilterSource(model, obs, self.n_particles, self.scheme)
        h = None if self.h is None else _resolve_h(self.h)
        self.seed_ = check_seed(self.random_state)
        results = farm(lambda rng: unbiased_filtering(source, k, m, h, rng), self.n_replicates, self.seed_, self.n_jobs)
        ok = [r.value for r in results if r.ok]
        self.n_failed_ = len(results) - len(ok)
        if not ok:
            raise RuntimeError(f"all replicates failed; first error: {results[0].error}")
        self.estimates_ = np.array([fr.estimate for fr in ok])  # (R, T, d_h)
        self.taus_ = np.array([fr.tau for fr in ok])
        self.pf_calls_ = np.array([fr.pf_calls for fr in ok])
        self.filtering_mean_ = self.estimates_.mean(axis=0)
        if len(ok) >= 2:
            self.se_ = self.estimates_.std(axis=0, ddof=1) / np.sqrt(len(ok))
        return self


class UnbiasedPosterior(_CoupledMixin, BaseEstimator):
    """Unbiased posterior expectations for static targets, with a tempered SMC sampler proposal.

    ``target="mixture"`` builds the Gaussian-mixture target from the data
    passed to :meth:`fit`; a :class:`TemperedTarget` is used as is and the
    data argument is ignored.
    """

    def __init__(self, target="mixture", n_components=4, component_sd=1.0, n_temperatures=200, n_particles=100,
                 resample=True, h="identity", k=0, m=0, rao_blackwell=False, n_replicates=100, random_state=None, n_jobs=1):
        self.target = target
        self.n_components = n_components
        self.component_sd = component_sd
        self.n_temperatures = n_temperatures
        self.n_particles = n_particles
        self.resample = resample
        self.h = h
        self.k = k
        self.m = m
        self.rao_blackwell = rao_blackwell
        self.n_replicates = n_replicates
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, y=None, X=None):
        check_count(self.n_particles, "n_particles")
        check_count(self.n_replicates, "n_replicates")
        k, m = check_k_m(self.k, self.m)
        if isinstance(self.target, TemperedTarget):
            target = self.target
        elif self.target == "mixture":
            if y is None:
                raise ValueError("the mixture target needs observations")
            data = check_observations(y).values[:, 0]
            sd = check_positive(self.component_sd, "component_sd")
            target = MixtureTarget(data, check_count(self.n_components, "n_components"), sd).tempered(self.n_temperatures)
        else:
            raise ValueError("target must be 'mixture' or a TemperedTarget")
        source = SmcSamplerSource(target, self.n_particles, bool(self.resample))
        request = EstimatorRequest(_resolve_h(self.h, point=True), k, m, bool(self.rao_blackwell))
        self.seed_ = check_seed(self.random_state)
        results = farm(lambda rng: run_coupled_pimh(source, request, rng, chunk=1), self.n_replicates, self.seed_, self.n_jobs)
        return self._store(results)


class SigmaTuner(BaseEstimator):
    """Pilot estimate of ``sd(log p_N)`` and the particle count giving ``target_sigma``."""

    def __init__(self, model="ar1", model_params=None, pilot_n=100, scheme="multinomial", n_replicates=500,
                 target_sigma=SIGMA_OPT, random_state=None):
        self.model = model
        self.model_params = model_params
        self.pilot_n = pilot_n
        self.scheme = scheme
        self.n_replicates = n_replicates
        self.target_sigma = target_sigma
        self.random_state = random_state

    def fit(self, y, X=None):
        obs = check_observations(y)
        pilot = check_count(self.pilot_n, "pilot_n")
        R = check_count(self.n_replicates, "n_replicates", 2)
        target = check_positive(self.target_sigma, "target_sigma")
        model = _resolve_model(self.model, self.model_params)
        est = estimate_sigma(ParticleFilterSource(model, obs, pilot, self.scheme), n_replicates=R, rng=check_seed(self.random_state))
        self.sigma_, self.sigma_se_ = est.sigma, est.se
        self.log_liks_ = est.log_liks
        self.n_particles_ = recommend_n(pilot, est.sigma, target) if est.sigma > 0 else 1
        return self
