import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coupled_pimh.coupled import EstimatorRequest, check_record, run_coupled_pimh
from coupled_pimh.smc_sampler import (
    MixtureTarget,
    SmcSamplerSource,
    TemperedTarget,
    conjugate_gaussian_target,
    conjugate_log_evidence,
    mixture_loglik,
    run_smc_sampler,
    run_smc_sampler_batch,
    rw_mh_move,
    tempering_schedule,
)

from conftest import zscore


def mixture_loglik_loop(x, data, sigma):
    """Oracle: double loop over observations and components."""
    total = 0.0
    for y in data:
        total += math.log(sum(stats.norm.pdf(y, xi, sigma) for xi in x) / len(x))
    return total


class TestSchedule:
    def test_quadratic(self):
        b = tempering_schedule(5)
        np.testing.assert_allclose(b, [0, 1 / 16, 1 / 4, 9 / 16, 1])

    def test_too_short(self):
        with pytest.raises(ValueError):
            tempering_schedule(1)

    def test_target_validation(self):
        f = lambda x: np.zeros(len(x))
        s = lambda n, rng: np.zeros((n, 1))
        for bad in ([0.0], [0.1, 1.0], [0.0, 0.5, 0.5, 1.0], [0.0, 0.9]):
            with pytest.raises(ValueError):
                TemperedTarget(s, f, np.array(bad))


class TestEvidence:
    @pytest.mark.parametrize("resample", [True, False])
    def test_flat_likelihood(self, resample):
        target = TemperedTarget(lambda n, rng: rng.normal(size=(n, 2)), lambda x: np.zeros(len(x)), tempering_schedule(7))
        for N in (1, 5, 40):
            batch = run_smc_sampler_batch(target, N, 3, resample, rng=np.random.default_rng(N))
            assert np.all(batch.log_z == 0.0)

    @pytest.mark.parametrize("resample", [True, False])
    def test_conjugate_unbiased(self, resample):
        y0 = 1.0
        target = conjugate_gaussian_target(y0, T=10)
        batch = run_smc_sampler_batch(target, 20, 10_000, resample, rng=np.random.default_rng(int(resample)))
        r = np.exp(batch.log_z - conjugate_log_evidence(y0))
        assert abs(zscore(r, 1.0)) < 3

    def test_conjugate_evidence_formula(self):
        assert conjugate_log_evidence(0.7) == pytest.approx(stats.norm.logpdf(0.7, 0, math.sqrt(2)))

    def test_single_particle_is_product_of_increments(self):
        # with N = 1 and no moves, Z is the likelihood at the prior draw
        target = TemperedTarget(lambda n, rng: rng.normal(size=(n, 1)), lambda x: -0.5 * x[:, 0] ** 2, tempering_schedule(6), mh_steps=0)
        rng = np.random.default_rng(3)
        x0 = np.random.default_rng(3).normal(size=(1, 1))
        res = run_smc_sampler(target, 1, True, rng)
        assert res.log_z == pytest.approx(-0.5 * x0[0, 0] ** 2)

    def test_dead_run(self):
        target = TemperedTarget(lambda n, rng: rng.normal(size=(n, 1)), lambda x: np.full(len(x), -np.inf), tempering_schedule(4))
        batch = run_smc_sampler_batch(target, 5, 2, rng=0)
        assert np.all(batch.dead) and np.all(np.isneginf(batch.log_z))

    def test_final_cloud_approximates_posterior(self):
        # posterior N(y0/2, 1/2)
        target = conjugate_gaussian_target(2.0, T=20, mh_steps=3)
        res = run_smc_sampler(target, 20_000, True, np.random.default_rng(4))
        w = np.exp(res.log_norm_weights)
        assert np.sum(w) == pytest.approx(1.0)
        m = np.sum(w * res.points[:, 0])
        v = np.sum(w * (res.points[:, 0] - m) ** 2)
        assert m == pytest.approx(1.0, abs=0.03)
        assert v == pytest.approx(0.5, abs=0.03)


class TestMixture:
    def test_single_component(self):
        data = np.array([0.3, -1.2, 2.0])
        t = MixtureTarget(data, D=1, sigma=1.5)
        assert mixture_loglik(np.array([0.4]), t) == pytest.approx(stats.norm.logpdf(data, 0.4, 1.5).sum(), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        t = MixtureTarget(rng.normal(0, 3, 12), D=3, sigma=rng.uniform(0.5, 2))
        x = rng.uniform(-5, 5, 3)
        assert mixture_loglik(x, t) == pytest.approx(mixture_loglik_loop(x, t.data, t.sigma), rel=1e-12)

    def test_permutation_bitwise(self):
        t = MixtureTarget.simulate(50, rng=np.random.default_rng(5))
        x = np.array([1.7, -2.2, 0.4, 5.1])
        vals = {mixture_loglik(np.array(p), t) for p in permutations(x)}
        assert len(vals) == 1

    def test_stack_matches_single(self):
        t = MixtureTarget.simulate(30, rng=np.random.default_rng(6))
        xs = np.random.default_rng(7).uniform(-5, 5, (9, 4))
        np.testing.assert_array_equal(mixture_loglik(xs, t), [mixture_loglik(x, t) for x in xs])

    def test_far_point_finite(self):
        t = MixtureTarget(np.array([0.0, 1.0]), D=2, sigma=0.1)
        assert np.isfinite(mixture_loglik(np.array([1e3, -1e3]), t))

    def test_dimension_mismatch(self):
        t = MixtureTarget(np.zeros(3), D=4)
        with pytest.raises(ValueError):
            mixture_loglik(np.zeros(3), t)

    def test_prior_box(self):
        t = MixtureTarget(np.zeros(3), D=2, box=10)
        np.testing.assert_array_equal(t.log_prior(np.array([[0.0, 10.0], [0.0, 10.01]])), [0.0, -np.inf])
        draws = t.sample_prior(1000, np.random.default_rng(0))
        assert draws.shape == (1000, 2) and np.all(np.abs(draws) <= 10)

    def test_label_symmetry(self):
        # exchangeable likelihood and prior: all coordinates share one posterior mean
        t = MixtureTarget.simulate(30, centers=(-2.0, 2.0), rng=np.random.default_rng(8)).tempered(30)
        src = SmcSamplerSource(t, 40)
        req = EstimatorRequest(lambda x: x, 2, 6)
        rng = np.random.default_rng(9)
        recs = [run_coupled_pimh(src, req, rng, chunk=2) for _ in range(300)]
        for rec in recs[:50]:
            check_record(rec)
        est = np.array([r.estimate for r in recs])
        d = est[:, 0] - est[:, 1]
        assert abs(zscore(d, 0.0)) < 3


class TestRwMh:
    def test_zero_scale_is_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 2))
        out = rw_mh_move(x, lambda z: -0.5 * np.sum(z**2, axis=1), 0.0, 10, rng=1)
        np.testing.assert_array_equal(out, x)

    def test_stays_in_box(self):
        lt = lambda z: np.where(np.all(np.abs(z) <= 1, axis=1), 0.0, -np.inf)
        out = rw_mh_move(np.zeros((500, 2)), lt, 2.0, 20, rng=2)
        assert np.all(np.abs(out) <= 1)

    def test_gaussian_moments(self):
        lt = lambda z: -0.5 * np.sum(z**2, axis=1)
        out = rw_mh_move(np.zeros((4000, 1)), lt, 2.4, 200, rng=3)[:, 0]
        assert abs(out.mean()) < 3 / math.sqrt(4000)
        assert abs(out.var(ddof=1) - 1) < 3 * math.sqrt(2 / 4000)

    def test_single_point_and_info(self):
        lt = lambda z: -0.5 * np.sum(z**2, axis=1)
        out, val, n_acc = rw_mh_move(np.zeros(3), lt, 0.5, 5, rng=4, return_info=True)
        assert out.shape == (3,) and val == pytest.approx(-0.5 * np.sum(out**2)) and 0 <= n_acc <= 5

    def test_zero_density_start(self):
        with pytest.raises(ValueError):
            rw_mh_move(np.zeros((1, 1)), lambda z: np.full(len(z), -np.inf), 1.0, 1, rng=0)


class TestSource:
    def test_draw_shapes_and_rb(self):
        t = conjugate_gaussian_target(0.5, T=5)
        src = SmcSamplerSource(t, 10)
        b = src.draw(4, np.random.default_rng(0), h=lambda x: x, rao_blackwell=True)
        assert b.log_lik.shape == (4,) and b.values.shape == (4, 1)

    def test_single_particle_rb_matches_draw(self):
        t = conjugate_gaussian_target(0.5, T=5)
        src = SmcSamplerSource(t, 1)
        a = src.draw(6, np.random.default_rng(1), h=lambda x: x)
        b = src.draw(6, np.random.default_rng(1), h=lambda x: x, rao_blackwell=True)
        np.testing.assert_allclose(a.values, b.values)
        np.testing.assert_array_equal(a.log_lik, b.log_lik)

    def test_coupled_posterior_mean_conjugate(self):
        # posterior mean y0 / 2
        src = SmcSamplerSource(conjugate_gaussian_target(2.0, T=10), 10)
        rng = np.random.default_rng(2)
        est = np.array([run_coupled_pimh(src, EstimatorRequest(lambda x: x, 0, 3), rng, chunk=4).estimate[0] for _ in range(2000)])
        assert abs(zscore(est, 1.0)) < 3
