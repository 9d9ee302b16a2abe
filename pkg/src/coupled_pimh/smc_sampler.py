"""Tempered SMC sampler / annealed importance sampling as a PIMH proposal.

Intermediate targets are ``gamma_t(x) = nu(x) L(x)^beta_t`` with a fixed
schedule ``0 = beta_1 < ... < beta_T = 1``.  Each step reweights the current
points by ``L(x)^(beta_t - beta_{t-1})``, optionally resamples, and then moves
every point with random-walk Metropolis steps leaving ``pi_t`` invariant.
The running product of mean incremental weights is an unbiased estimate of
``Z = int nu(x) L(x) dx``, so a sampler run can serve as the independence
proposal of (coupled) PIMH for static posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._utils import LOG_2PI, as_generator, inverse_cdf_rows, logsumexp_rows
from .coupled import ProposalBatch, ProposalSource, _output_dim
from .particle_filter import evaluate_test_function


def tempering_schedule(T: int) -> np.ndarray:
    """Quadratic schedule ``beta_t = ((t - 1) / (T - 1))^2`` for ``t = 1..T``."""
    T = int(T)
    if T < 2:
        raise ValueError("a tempering schedule needs T >= 2")
    return (np.arange(T) / (T - 1)) ** 2


def _zero_log_prior(x):
    return np.zeros(x.shape[0])


@dataclass(frozen=True)
class TemperedTarget:
    """Tempered path from a prior ``nu`` to the posterior ``nu L / Z``.

    Parameters
    ----------
    prior_sampler : callable
        ``(size, rng) -> (size, dim)`` draws from ``nu``.
    log_likelihood : callable
        ``(n, dim) -> (n,)`` values of ``log L``; may be ``-inf``.
    betas : array
        Strictly increasing schedule from 0 to 1.
    mh_scale : float
        Standard deviation of the isotropic random-walk proposal.
    mh_steps : int
        Metropolis steps per temperature.
    log_prior : callable, optional
        ``log nu`` up to an additive constant, used only by the move kernel
        (``-inf`` outside the support).  Defaults to a flat prior.
    """

    prior_sampler: Callable
    log_likelihood: Callable
    betas: np.ndarray
    mh_scale: float = 1.0
    mh_steps: int = 1
    log_prior: Callable = _zero_log_prior

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        if betas.ndim != 1 or betas.size < 2:
            raise ValueError("betas must be a 1-d schedule with at least two entries")
        if betas[0] != 0.0 or betas[-1] != 1.0 or np.any(np.diff(betas) <= 0):
            raise ValueError("betas must increase strictly from 0 to 1")
        if self.mh_scale < 0 or self.mh_steps < 0:
            raise ValueError("mh_scale and mh_steps must be nonnegative")
        object.__setattr__(self, "betas", betas)

    @property
    def T(self) -> int:
        return self.betas.size


# --------------------------------------------------------------------------
# Metropolis moves
# --------------------------------------------------------------------------


def rw_mh_move(x, log_target, scale: float, n_steps: int, rng=None, current_log_target=None, return_info: bool = False):
    """Random-walk Metropolis with isotropic Gaussian proposals.

    ``x`` is one point ``(dim,)`` or a stack ``(n, dim)`` moved independently;
    ``log_target`` maps ``(n, dim) -> (n,)``.  Proposals with ``-inf`` target
    (e.g. outside a prior box) are always rejected.

    Returns the moved points, or ``(points, log_target_values, n_accepted)``
    when ``return_info`` is set.
    """
    rng = as_generator(rng)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.array(x[None, :] if single else x, dtype=float)
    lt = np.asarray(log_target(xs) if current_log_target is None else current_log_target, dtype=float).copy()
    if np.any(np.isneginf(lt)) or np.any(np.isnan(lt)):
        raise ValueError("starting point has zero target density")
    accepted = np.zeros(xs.shape[0], dtype=np.int64)
    if scale > 0:
        for _ in range(int(n_steps)):
            prop = xs + scale * rng.standard_normal(xs.shape)
            lt_prop = np.asarray(log_target(prop), dtype=float)
            if np.any(np.isnan(lt_prop)):
                raise ValueError("log target returned NaN")
            acc = np.log(rng.random(xs.shape[0])) < lt_prop - lt
            xs[acc] = prop[acc]
            lt[acc] = lt_prop[acc]
            accepted += acc
    out = xs[0] if single else xs
    if return_info:
        return out, (lt[0] if single else lt), (int(accepted[0]) if single else accepted)
    return out


# --------------------------------------------------------------------------
# sampler
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SmcBatch:
    """``B`` independent sampler outputs: points ``(B, N, dim)``, normalised
    final log-weights ``(B, N)`` and ``log Z_{T,N}`` ``(B,)``."""

    points: np.ndarray
    log_norm_weights: np.ndarray
    log_z: np.ndarray

    @property
    def dead(self) -> np.ndarray:
        return np.isneginf(self.log_z)


@dataclass(frozen=True)
class SmcResult:
    points: np.ndarray
    log_norm_weights: np.ndarray
    log_z: float


def run_smc_sampler_batch(target: TemperedTarget, n_particles: int, n_runs: int = 1, resample: bool = True, rng=None) -> SmcBatch:
    """Run ``n_runs`` independent tempered samplers side by side.

    Without resampling this is annealed importance sampling and ``log Z`` is
    the log of the average over particles of the product of incremental
    weights.  A run whose incremental weights are all zero at some step is
    dead (``log Z = -inf``) and is rejected by PIMH.
    """
    N, B = int(n_particles), int(n_runs)
    if N < 1 or B < 1:
        raise ValueError("n_particles and n_runs must be at least 1")
    rng = as_generator(rng)
    x = np.asarray(target.prior_sampler(B * N, rng), dtype=float).reshape(B * N, -1)
    dim = x.shape[1]
    ll = np.asarray(target.log_likelihood(x), dtype=float)
    lp = np.asarray(target.log_prior(x), dtype=float)
    log_w = np.full((B, N), -np.log(N))
    log_z = np.zeros(B)
    alive = np.ones(B, dtype=bool)
    rows = np.arange(B)[:, None]
    betas = target.betas
    T = betas.size
    for t in range(1, T):
        inc = (betas[t] - betas[t - 1]) * ll.reshape(B, N)
        # zero-likelihood points stay at zero weight even when 0 * -inf arises
        inc = np.where(np.isneginf(ll.reshape(B, N)), -np.inf, inc)
        if np.any(np.isnan(inc)) or np.any(inc == np.inf):
            raise ValueError(f"log-likelihood returned NaN or +inf at step {t + 1}")
        lw = log_w + inc
        lse = logsumexp_rows(lw)
        alive &= np.isfinite(lse)
        log_z = np.where(alive, log_z + lse, -np.inf)
        log_w = np.where(alive[:, None], lw - np.where(alive, lse, 0.0)[:, None], -np.log(N))
        if resample and t < T - 1:
            a = inverse_cdf_rows(np.exp(log_w), rng.random((B, N)))
            flat = (rows * N + a).ravel()
            x, ll, lp = x[flat], ll[flat], lp[flat]
            log_w = np.full((B, N), -np.log(N))
        if target.mh_steps and target.mh_scale > 0:
            beta = betas[t]
            ok = np.isfinite(ll) & np.isfinite(lp)
            if np.all(ok):
                x, ll, lp = _tempered_move(x, ll, lp, beta, target, rng)
            else:
                # points with zero density carry zero weight; leave them be
                x_ok, ll_ok, lp_ok = _tempered_move(x[ok], ll[ok], lp[ok], beta, target, rng)
                x[ok], ll[ok], lp[ok] = x_ok, ll_ok, lp_ok
    log_w = np.where(alive[:, None], log_w, -np.inf)
    return SmcBatch(x.reshape(B, N, dim), log_w, log_z)


def _tempered_move(x, ll, lp, beta, target, rng):
    x = x.copy()
    ll = ll.copy()
    lp = lp.copy()
    for _ in range(int(target.mh_steps)):
        prop = x + target.mh_scale * rng.standard_normal(x.shape)
        lp_prop = np.asarray(target.log_prior(prop), dtype=float)
        ll_prop = np.full(x.shape[0], -np.inf)
        inside = np.isfinite(lp_prop)
        if np.any(inside):
            ll_prop[inside] = target.log_likelihood(prop[inside])
        # beta * (-inf) is -inf for beta > 0 and taken as 0 at beta = 0
        tgt_prop = lp_prop + np.where(np.isneginf(ll_prop) & (beta == 0), 0.0, beta * ll_prop)
        tgt = lp + np.where(np.isneginf(ll) & (beta == 0), 0.0, beta * ll)
        with np.errstate(invalid="ignore"):
            log_ratio = np.where(np.isneginf(tgt_prop), -np.inf, tgt_prop - tgt)
        acc = np.log(rng.random(x.shape[0])) < log_ratio
        x[acc], ll[acc], lp[acc] = prop[acc], ll_prop[acc], lp_prop[acc]
    return x, ll, lp


def run_smc_sampler(target: TemperedTarget, n_particles: int, resample: bool = True, rng=None) -> SmcResult:
    """One sampler run: final weighted cloud and ``log Z_{T,N}``."""
    batch = run_smc_sampler_batch(target, n_particles, 1, resample, rng)
    return SmcResult(batch.points[0], batch.log_norm_weights[0], float(batch.log_z[0]))


class SmcSamplerSource(ProposalSource):
    """Tempered SMC sampler runs as PIMH proposals.

    A proposal is one point drawn from the final weighted cloud, tagged with
    the run's ``log Z``.  Test functions take a stack of points ``(n, dim)``.
    """

    def __init__(self, target: TemperedTarget, n_particles: int, resample: bool = True):
        self.target = target
        self.n_particles = int(n_particles)
        self.resample = bool(resample)

    def __repr__(self):
        return f"SmcSamplerSource(N={self.n_particles}, T={self.target.T}, resample={self.resample})"

    def draw(self, size, rng, h=None, rao_blackwell=False):
        batch = run_smc_sampler_batch(self.target, self.n_particles, size, self.resample, rng)
        alive = ~batch.dead
        weights = np.where(alive[:, None], np.exp(batch.log_norm_weights), 1.0)
        leaves = inverse_cdf_rows(weights, rng.random((size, 1)))[:, 0]
        samples = batch.points[np.arange(size), leaves]
        samples[~alive] = np.nan
        values = None
        if h is not None:
            values = np.zeros((size, _output_dim(h, samples)))
            if rao_blackwell:
                if np.any(alive):
                    pts = batch.points[alive]
                    b, N, dim = pts.shape
                    v = evaluate_test_function(h, pts.reshape(b * N, dim)).reshape(b, N, -1)
                    values[alive] = np.einsum("bn,bnk->bk", weights[alive], v)
            elif np.any(alive):
                values[alive] = evaluate_test_function(h, samples[alive])
        return ProposalBatch(batch.log_z.copy(), values, samples)


# --------------------------------------------------------------------------
# concrete targets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureTarget:
    """Equal-weight Gaussian mixture likelihood with a uniform prior on ``[-box, box]^D``."""

    data: np.ndarray
    D: int = 4
    sigma: float = 1.0
    box: float = 10.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float).ravel()
        if data.size < 1:
            raise ValueError("need at least one observation")
        if not np.all(np.isfinite(data)):
            raise ValueError("observations must be finite")
        if int(self.D) < 1 or not self.sigma > 0 or not self.box > 0:
            raise ValueError("need D >= 1, sigma > 0 and box > 0")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "D", int(self.D))

    @property
    def M(self) -> int:
        return self.data.size

    @classmethod
    def simulate(cls, M: int = 100, centers=(-3.0, 0.0, 3.0, 6.0), sigma: float = 1.0, box: float = 10.0, rng=None):
        """Draw ``M`` observations from the mixture with component means ``centers``."""
        rng = as_generator(rng)
        centers = np.asarray(centers, dtype=float)
        comp = rng.integers(centers.size, size=M)
        return cls(centers[comp] + sigma * rng.standard_normal(M), centers.size, sigma, box)

    def log_prior(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(np.all(np.abs(x) <= self.box, axis=-1), 0.0, -np.inf)

    def sample_prior(self, size, rng):
        return as_generator(rng).uniform(-self.box, self.box, (size, self.D))

    def log_likelihood(self, x):
        return mixture_loglik(x, self)

    def tempered(self, T: int = 200, mh_scale: float = 1.0, mh_steps: int = 1) -> TemperedTarget:
        return TemperedTarget(self.sample_prior, self.log_likelihood, tempering_schedule(T), mh_scale, mh_steps, self.log_prior)


def mixture_loglik(x, target: MixtureTarget):
    """``sum_n log((1/D) sum_i N(y_n; x_i, sigma^2))`` for one point or a stack ``(n, D)``.

    Components are sorted first so the value is bitwise invariant to
    permutations of ``x``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[-1] != target.D:
        raise ValueError(f"point has dimension {xs.shape[-1]}, target expects {target.D}")
    xs = np.sort(xs, axis=-1)
    s2 = target.sigma**2
    out = np.empty(xs.shape[0])
    # chunk to bound the (n, M, D) temporary
    step = max(1, 2**20 // (target.M * target.D))
    for i in range(0, xs.shape[0], step):
        diff = target.data[None, :, None] - xs[i : i + step, None, :]
        lse = logsumexp_rows(-0.5 * diff**2 / s2, axis=-1)
        out[i : i + step] = lse.sum(axis=1)
    out += target.M * (-np.log(target.D) - 0.5 * (LOG_2PI + np.log(s2)))
    return float(out[0]) if single else out


def conjugate_gaussian_target(y0: float, T: int = 10, mh_scale: float = 1.0, mh_steps: int = 1) -> TemperedTarget:
    """Prior ``N(0, 1)`` with likelihood ``N(y0; x, 1)``; the evidence is ``N(y0; 0, 2)``."""
    y0 = float(y0)

    def sample_prior(size, rng):
        return as_generator(rng).standard_normal((size, 1))

    def log_likelihood(x):
        x = np.asarray(x, dtype=float)[:, 0]
        return -0.5 * (LOG_2PI + (y0 - x) ** 2)

    def log_prior(x):
        return -0.5 * np.asarray(x, dtype=float)[:, 0] ** 2

    return TemperedTarget(sample_prior, log_likelihood, tempering_schedule(T), mh_scale, mh_steps, log_prior)


def conjugate_log_evidence(y0: float) -> float:
    return float(-0.5 * (LOG_2PI + np.log(2.0) + y0**2 / 2.0))
