"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Heavy by design (tens of minutes in total); select with ``-m acceptance``
or deselect with ``-m "not acceptance"``.
"""

import math

import numpy as np
import pytest

from coupled_pimh.coupled import (
    EstimatorRequest,
    ParticleFilterSource,
    check_record,
    run_coupled_pimh,
)
from coupled_pimh.harness import ExperimentConfig, aggregate, farm, grid_minimum, path_test_function, point_test_function, run_experiment
from coupled_pimh.large_sample import estimate_sigma, recommend_n, tau_one_closed, tau_survival
from coupled_pimh.models import (
    KineticModel,
    LinearGaussianModel,
    SvParams,
    default_dataset,
    kalman_oracle,
    simulate_ssm,
    sv_transition_many,
)
from coupled_pimh.particle_filter import run_pf_batch
from coupled_pimh.smc_sampler import (
    MixtureTarget,
    SmcSamplerSource,
    conjugate_gaussian_target,
    conjugate_log_evidence,
    run_smc_sampler_batch,
)

import conftest

pytestmark = pytest.mark.acceptance

# every coupled record produced in this module, for the structural criterion
RECORDS: list = []


def report(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    conftest.ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def keep(results):
    recs = [r.value for r in results if r.ok]
    RECORDS.extend(recs)
    return recs


def survival_check(taus, sigma, n_max):
    """Largest |empirical - predicted| / SE over n <= n_max, SE binomial under the prediction."""
    taus = np.asarray(taus)
    n = np.arange(1, n_max + 1)
    pred = tau_survival(n, sigma)
    emp = np.array([np.mean(taus >= k) for k in n])
    se = np.sqrt(pred * (1 - pred) / taus.size)
    z = np.where(se > 0, np.abs(emp - pred) / np.where(se > 0, se, 1), np.where(emp == pred, 0.0, np.inf))
    return z, emp, pred


def test_criterion_01_unbiased_smoothing():
    model = LinearGaussianModel()
    obs = default_dataset(model, 20)[1]
    kr = kalman_oracle(model, obs)
    source = ParticleFilterSource(model, obs, 64)
    req = EstimatorRequest(path_test_function("smoothing-set"), 0, 0)
    recs = keep(farm(lambda rng: run_coupled_pimh(source, req, rng), 10_000, seed=101))
    est = np.array([r.estimate for r in recs])[:, :3]
    truth = np.array([kr.smooth_means[0], kr.smooth_means[-1], kr.smooth_means.sum()])
    z = conftest.zscore(est, truth)
    report(1, len(recs) == 10_000 and np.all(np.abs(z) < 3), f"z-scores (x1, xT, sum x) = {np.round(z, 2).tolist()}, R={len(recs)}")


def test_criterion_02_pf_likelihood_unbiased():
    model = LinearGaussianModel()
    obs = default_dataset(model, 20)[1]
    truth = kalman_oracle(model, obs).log_lik
    zs = {}
    for i, scheme in enumerate(("multinomial", "systematic")):
        for N in (10, 50):
            ll = run_pf_batch(model, obs, N, 10_000, scheme, np.random.default_rng(200 + 100 * i + N), keep_weights=False).log_lik
            zs[(scheme, N)] = float(conftest.zscore(np.exp(ll - truth), 1.0))
    ok = all(abs(v) < 3 for v in zs.values())
    report(2, ok, "z-scores " + ", ".join(f"{s[:4]}/N={N}: {v:+.2f}" for (s, N), v in zs.items()))


def test_criterion_03_closed_form_meeting_probability():
    a, b = tau_one_closed(1.0), tau_one_closed(0.1)
    grid = np.linspace(1e-3, 10, 2000)
    lowest = min(tau_one_closed(s) for s in grid)
    ok = abs(a - 0.7138) <= 5e-4 and abs(b - 0.9483) <= 5e-4 and lowest >= 0.5
    report(3, ok, f"P[tau=1] at sigma=1: {a:.5f}, sigma=0.1: {b:.5f}, min over (0,10]: {lowest:.5f}")


@pytest.mark.parametrize("N", [10, 110])
def test_criterion_04_meeting_time_law(N):
    model = LinearGaussianModel()
    obs = default_dataset(model, 100)[1]
    source = ParticleFilterSource(model, obs, N)
    sig = estimate_sigma(source, n_replicates=10_000, rng=np.random.default_rng(400 + N))
    req = EstimatorRequest(path_test_function("x1"), 0, 0)
    recs = keep(farm(lambda rng: run_coupled_pimh(source, req, rng), 10_000, seed=4000 + N))
    taus = np.array([r.tau for r in recs])
    z, emp, pred = survival_check(taus, sig.sigma, 20)
    worst = int(np.argmax(z)) + 1
    detail = (f"N={N}: sigma_hat={sig.sigma:.3f} (se {sig.se:.3f}); max |dev|/SE over n<=20 = {z.max():.2f} at n={worst} "
              f"(emp {emp[worst - 1]:.4f} vs pred {pred[worst - 1]:.4f}); {int(np.sum(z > 2))} of 20 beyond 2 SE")
    key = 4 if N == 10 else 4.5
    line = f"criterion  4 [N={N}]: {'PASS' if z.max() <= 2 else 'FAIL'} - {detail}"
    conftest.ACCEPTANCE_LINES[key] = line
    print(line)
    assert z.max() <= 2, line


def test_criterion_06_conditional_geometric_law():
    model = LinearGaussianModel()
    obs = default_dataset(model, 20)[1]
    source = ParticleFilterSource(model, obs, 16)
    rng = np.random.default_rng(600)
    # pin chain 1 at a high-likelihood draw so that alpha(z0) is far from 1
    pool = source.draw(200, rng, path_test_function("x1"))
    pick = int(np.argsort(pool.log_lik)[195])
    z0, v0 = float(pool.log_lik[pick]), pool.values[pick]
    # alpha_hat from independent accept/reject trials against the pinned state
    lls = np.concatenate([source.draw(10_000, rng).log_lik for _ in range(10)])
    trials = np.log(rng.random(lls.size)) <= np.minimum(0.0, lls - z0)
    alpha = trials.mean()
    alpha_se = math.sqrt(alpha * (1 - alpha) / trials.size)
    req = EstimatorRequest(path_test_function("x1"), 0, 0)
    recs = keep(farm(lambda g: run_coupled_pimh(source, req, g, initial=(z0, v0)), 10_000, seed=6000))
    taus = np.array([r.tau for r in recs])
    n = np.arange(1, 11)
    emp = np.array([np.mean(taus > k) for k in n])
    pred = (1 - alpha) ** n
    se = np.sqrt(pred * (1 - pred) / taus.size + (n * (1 - alpha) ** (n - 1) * alpha_se) ** 2)
    z = np.abs(emp - pred) / se
    report(6, bool(np.all(z < 3)), f"alpha_hat={alpha:.4f} at z0={z0:.2f}; max |dev|/SE over n<=10 = {z.max():.2f}")


def test_criterion_07_tuning_rule():
    cfg = ExperimentConfig(kind="inefficiency-grid", model="ar1", T=100, N_grid=[10, 20, 35, 60, 110], k=20, m=512,
                           h="smoothing-set", replicates=1000, sigma_replicates=5000, seed=700)
    out = run_experiment(cfg)
    names = ["x1", "xT", "sum_x", "sum_x2"]
    minima = [grid_minimum(out.rows, i) for i in range(4)]
    sig = [m["sigma_hat"] for m in minima]
    table = "; ".join(f"N={r['N']} sigma={r['sigma_hat']:.2f} C=" + "/".join(f"{r[f'inefficiency_{i}']:.3g}" for i in range(4)) for r in out.rows)
    print(table)
    # the particle count suggested from a pilot at the smallest grid point
    pilot = out.rows[0]
    suggested = recommend_n(pilot["N"], pilot["sigma_hat"])
    ok = all(0.6 <= s <= 1.4 for s in sig)
    detail = ", ".join(f"{h}: N={m['N']} sigma_hat={s:.2f}" for h, m, s in zip(names, minima, sig))
    report(7, ok, f"grid minima {detail}; recommend_n from N={pilot['N']} pilot: {suggested}")


def _rb_pair(source, h, seed, R):
    req_plain = EstimatorRequest(h, 0, 0)
    req_rb = EstimatorRequest(h, 0, 0, rao_blackwell=True)
    plain = keep(farm(lambda g: run_coupled_pimh(source, req_plain, g), R, seed))
    rb = keep(farm(lambda g: run_coupled_pimh(source, req_rb, g), R, seed))
    assert all(a.tau == b.tau for a, b in zip(plain, rb))
    return np.array([r.estimate[0] for r in plain]), np.array([r.estimate[0] for r in rb])


def test_criterion_08_rao_blackwellisation():
    model = LinearGaussianModel()
    obs = default_dataset(model, 50)[1]
    source = ParticleFilterSource(model, obs, 8)
    H, Hbar = _rb_pair(source, path_test_function("xT"), 800, 5000)
    a = (Hbar - Hbar.mean()) ** 2
    b = (H - H.mean()) ** 2
    se_diff = np.std(a - b, ddof=1) / math.sqrt(a.size)
    var_ok = Hbar.var(ddof=1) <= H.var(ddof=1) + 3 * se_diff
    H1, H1bar = _rb_pair(source, path_test_function("x1"), 801, 2000)
    same = np.mean(np.isclose(H1, H1bar, rtol=1e-12, atol=1e-12))
    report(8, bool(var_ok and same > 0.9),
           f"x_T: Var[RB]={Hbar.var(ddof=1):.4f} vs Var[plain]={H.var(ddof=1):.4f} (diff SE {se_diff:.4f}); x_1: equal in {100 * same:.1f}% of runs")


def test_criterion_09_smc_evidence_unbiased():
    y0 = 1.0
    target = conjugate_gaussian_target(y0, T=10)
    zs = {}
    for resample in (True, False):
        batch = run_smc_sampler_batch(target, 20, 10_000, resample, np.random.default_rng(900 + resample))
        zs[resample] = float(conftest.zscore(np.exp(batch.log_z - conjugate_log_evidence(y0)), 1.0))
    report(9, all(abs(z) < 3 for z in zs.values()), f"z-scores with resampling {zs[True]:+.2f}, without {zs[False]:+.2f}")


def test_criterion_10_mixture_meeting_times():
    mt = MixtureTarget.simulate(100, rng=np.random.default_rng(0))
    source = SmcSamplerSource(mt.tempered(200), 100)
    req = EstimatorRequest(point_test_function("mixture"), 0, 0)
    R = 1000
    recs = keep(farm(lambda g: run_coupled_pimh(source, req, g, chunk=1), R, seed=1000))
    agg = aggregate(recs)
    p95, p99 = agg.tau_percentiles[95], agg.tau_percentiles[99]
    ok = abs(p95 - 6) <= 3 and abs(p99 - 13) <= 3
    report(10, ok, f"R={R}: 95th percentile {p95} (target 6 +/- 3), 99th percentile {p99} (target 13 +/- 3), max tau {max(r.tau for r in recs)}")


def test_criterion_11_substitutes():
    # stochastic volatility: stationary moments reached from a fixed start
    p = SvParams()
    rng = np.random.default_rng(1100)
    w = np.full(20_000, p.xi)
    for _ in range(300):
        w, _ = sv_transition_many(w, p, rng)
    shape = p.xi**2 / p.omega2
    z_mean = (w.mean() - p.xi) / math.sqrt(p.omega2 / w.size)
    z_var = (w.var(ddof=1) - p.omega2) / (p.omega2 * math.sqrt((2 + 6 / shape) / w.size))
    sv_ok = abs(z_mean) < 3 and abs(z_var) < 3
    # kinetic model: integer, nonnegative, capacity-bounded states
    km = KineticModel()
    states, _ = simulate_ssm(km, 200, np.random.default_rng(1101))
    obs = default_dataset(km, 20)[1]
    source = ParticleFilterSource(km, obs, 128)
    cloud = source.run(200, np.random.default_rng(1102), keep_weights=False)
    paths = cloud.drawn_paths()
    inv_ok = all(
        a.dtype.kind == "i" and np.all(a >= 0) and np.all(a[..., 3] <= km.params.capacity) for a in (states, paths)
    )
    sig = estimate_sigma(source, n_replicates=5000, rng=np.random.default_rng(1103))
    req = EstimatorRequest(path_test_function("sum_x"), 0, 0)
    recs = keep(farm(lambda g: run_coupled_pimh(source, req, g), 3000, seed=1104))
    z, _, _ = survival_check([r.tau for r in recs], sig.sigma, 10)
    surv_ok = z.max() <= 2
    report(11, bool(sv_ok and inv_ok and surv_ok),
           f"SV moment z-scores mean {z_mean:+.2f}, var {z_var:+.2f}; kinetic invariants {'hold' if inv_ok else 'violated'}; "
           f"kinetic T=20 N=128 sigma_hat={sig.sigma:.3f}, survival max |dev|/SE over n<=10 = {z.max():.2f}")


def test_criterion_05_coupling_structure():
    # runs last: every record from the criteria above, plus fresh runs with post-meeting tracking
    model = LinearGaussianModel()
    obs = default_dataset(model, 50)[1]
    source = ParticleFilterSource(model, obs, 12)
    req = EstimatorRequest(path_test_function("sum_x"), 2, 6)
    tracked = keep(farm(lambda g: run_coupled_pimh(source, req, g, track_after_meeting=True), 2000, seed=500))
    violations = 0
    for rec in RECORDS:
        try:
            check_record(rec)
            c1, c2 = rec.chain1_loglik, rec.chain2_loglik
            changes = np.flatnonzero(c1[1:] != c1[:-1])
            # the first change of chain 1 is the meeting (equal values can hide an acceptance)
            if changes.size and changes[0] + 1 < rec.tau:
                raise AssertionError("chain 1 moved before the meeting")
        except AssertionError:
            violations += 1
    report(5, violations == 0, f"{violations} violations over {len(RECORDS)} coupled runs ({len(tracked)} tracked past the meeting)")
