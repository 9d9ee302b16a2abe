import numpy as np
import pytest
from sklearn.base import clone

from coupled_pimh import SigmaTuner, UnbiasedFilter, UnbiasedPosterior, UnbiasedSmoother
from coupled_pimh.models import LinearGaussianModel, kalman_oracle
from coupled_pimh.smc_sampler import MixtureTarget, conjugate_gaussian_target

from conftest import zscore


def test_params_and_clone():
    est = UnbiasedSmoother(n_particles=12, k=1, m=4, random_state=3)
    params = est.get_params()
    assert params["n_particles"] == 12 and params["m"] == 4
    c = clone(est)
    assert c.get_params() == params and not hasattr(c, "estimate_")


def test_smoother_reproducible_and_unbiased(ar1_short):
    model, obs, kr = ar1_short
    est = UnbiasedSmoother(model, n_particles=16, h="x1", m=2, n_replicates=600, random_state=0).fit(obs.values)
    assert est.estimates_.shape == (600, 1)
    assert abs(zscore(est.estimates_[:, 0], kr.smooth_means[0])) < 3
    again = UnbiasedSmoother(model, n_particles=16, h="x1", m=2, n_replicates=600, random_state=0).fit(obs.values)
    np.testing.assert_array_equal(est.estimates_, again.estimates_)
    surv = est.survival()
    assert surv[0, 1] == 1.0


def test_smoother_named_model(ar1_tiny):
    _, obs, _ = ar1_tiny
    est = UnbiasedSmoother("ar1", {"a": 0.9}, n_particles=4, n_replicates=3, random_state=1).fit(obs.values[:, 0])
    assert est.estimate_.shape == (1,)


@pytest.mark.parametrize("bad", [dict(n_particles=0), dict(k=3, m=1), dict(scheme="residual"), dict(n_replicates=1.5)])
def test_smoother_validation(ar1_tiny, bad):
    _, obs, _ = ar1_tiny
    with pytest.raises((ValueError, TypeError)):
        UnbiasedSmoother(**bad).fit(obs.values)


def test_nonfinite_observations():
    with pytest.raises(ValueError):
        UnbiasedSmoother().fit([0.0, np.nan, 1.0])


def test_filter(ar1_short):
    model, obs, _ = ar1_short
    obs8 = obs.truncate(8)
    kr = kalman_oracle(model, obs8)
    f = UnbiasedFilter(model, n_particles=16, n_replicates=400, random_state=2).fit(obs8)
    assert f.filtering_mean_.shape == (8, 1)
    z = (f.filtering_mean_[:, 0] - kr.filter_means) / f.se_[:, 0]
    assert np.all(np.abs(z) < 3.5)


def test_posterior_conjugate():
    post = UnbiasedPosterior(conjugate_gaussian_target(2.0, T=10), n_particles=10, m=2, n_replicates=500, random_state=4).fit()
    assert abs(zscore(post.estimates_[:, 0], 1.0)) < 3


def test_posterior_mixture_data():
    data = MixtureTarget.simulate(20, rng=np.random.default_rng(0)).data
    post = UnbiasedPosterior(n_temperatures=10, n_particles=10, n_replicates=3, random_state=1).fit(data)
    assert post.estimate_.shape == (4,)
    with pytest.raises(ValueError):
        UnbiasedPosterior().fit()


def test_sigma_tuner(ar1_short):
    model, obs, _ = ar1_short
    t = SigmaTuner(model, pilot_n=10, n_replicates=300, random_state=5).fit(obs)
    assert t.sigma_ > 0 and t.sigma_se_ > 0
    assert t.n_particles_ == max(1, round(10 * t.sigma_**2 / 0.92**2))
