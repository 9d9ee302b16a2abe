"""Large-sample (log-normal error) theory of coupled PIMH meeting times.

When ``T`` is large the log-likelihood error ``Z = log p_N - log p`` is
approximately ``N(-sigma^2 / 2, sigma^2)`` under the particle filter, and the
PIMH chain on ``Z`` becomes the kernel ``Q_sigma`` with invariant law
``N(+sigma^2 / 2, sigma^2)``.  This module evaluates the acceptance
probability ``alpha_sigma(z)``, the meeting-time law, the expected meeting
time, and the tuning rule ``sigma ~= 0.92``; it also provides the sigma
estimator and an integrated autocorrelation time estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from ._utils import as_generator

SIGMA_OPT = 0.92


def _check_sigma(sigma):
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")


def proposal_logpdf(z, sigma):
    """Log-density of ``g_sigma = N(-sigma^2/2, sigma^2)``."""
    z = np.asarray(z, dtype=float)
    return -0.5 * np.log(2 * np.pi * sigma**2) - (z + 0.5 * sigma**2) ** 2 / (2 * sigma**2)


def invariant_logpdf(z, sigma):
    """Log-density of ``pi_sigma = N(+sigma^2/2, sigma^2)``."""
    z = np.asarray(z, dtype=float)
    return -0.5 * np.log(2 * np.pi * sigma**2) - (z - 0.5 * sigma**2) ** 2 / (2 * sigma**2)


def alpha_sigma(z, sigma):
    """Average acceptance probability of ``Q_sigma`` from state ``z``.

    ``1 - Phi((z + s^2/2)/s) + exp(-z) Phi((z - s^2/2)/s)``; the second
    product is formed in log space so it neither overflows for very negative
    ``z`` nor loses precision.
    """
    _check_sigma(sigma)
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    half = 0.5 * sigma**2
    first = special.ndtr(-(z + half) / sigma)
    second = np.exp(-z + special.log_ndtr((z - half) / sigma))
    alpha = first + second
    if np.any(alpha > 1 + 1e-12) or np.any(alpha < -1e-12):
        raise FloatingPointError("acceptance probability outside [0, 1]")
    alpha = np.clip(alpha, 0.0, 1.0)
    return alpha if alpha.ndim else float(alpha)


def tau_one_closed(sigma) -> float:
    """``P[tau = 1] = (1 + exp(sigma^2) erfc(sigma)) / 2``, via the scaled erfc."""
    _check_sigma(sigma)
    return 0.5 * (1.0 + float(special.erfcx(sigma)))


def _integration_range(sigma, width):
    centre = -0.5 * sigma**2
    return centre - width * sigma, centre + width * sigma


def tau_pmf(n, sigma, epsabs: float = 1e-10):
    """Large-sample ``P[tau = n] = int alpha (1 - alpha)^(n-1) g_sigma dz``.

    ``n`` may be an integer or an array of integers (evaluated jointly with
    vector-valued adaptive quadrature).  Integration runs over
    ``-sigma^2/2 +/- 10 sigma``.
    """
    _check_sigma(sigma)
    ns = np.atleast_1d(np.asarray(n))
    if np.any(ns < 1) or np.any(ns != np.floor(ns)):
        raise ValueError("n must be a positive integer")
    ns = ns.astype(float)
    lo, hi = _integration_range(sigma, 10.0)

    def integrand(z):
        a = alpha_sigma(z, sigma)
        # log1p keeps (1 - a)^(n - 1) accurate when a is small
        with np.errstate(divide="ignore"):
            log_surv = (ns - 1.0) * np.log1p(-a) if a < 1 else np.where(ns == 1, 0.0, -np.inf)
        return a * np.exp(log_surv + proposal_logpdf(z, sigma))

    value, err = integrate.quad_vec(integrand, lo, hi, epsabs=epsabs, epsrel=1e-10, limit=2000)
    if not np.all(np.isfinite(value)) or err > 10 * epsabs * max(1, ns.size):
        raise ArithmeticError(f"quadrature did not converge (error estimate {err:g})")
    return float(value[0]) if np.ndim(n) == 0 else value


def tau_survival(n, sigma, epsabs: float = 1e-10):
    """Large-sample ``P[tau >= n] = int (1 - alpha)^(n-1) g_sigma dz``."""
    _check_sigma(sigma)
    ns = np.atleast_1d(np.asarray(n)).astype(float)
    if np.any(ns < 1):
        raise ValueError("n must be a positive integer")
    lo, hi = _integration_range(sigma, 10.0)

    def integrand(z):
        a = alpha_sigma(z, sigma)
        with np.errstate(divide="ignore"):
            log_surv = (ns - 1.0) * np.log1p(-a) if a < 1 else np.where(ns == 1, 0.0, -np.inf)
        return np.exp(log_surv + proposal_logpdf(z, sigma))

    value, err = integrate.quad_vec(integrand, lo, hi, epsabs=epsabs, epsrel=1e-10, limit=2000)
    if not np.all(np.isfinite(value)):
        raise ArithmeticError("quadrature did not converge")
    value = np.clip(value, 0.0, 1.0)
    return float(value[0]) if np.ndim(n) == 0 else value


def expected_tau(sigma, epsabs: float = 1e-8) -> float:
    """Large-sample ``E[tau] = E_g[1 / alpha_sigma(Z)]`` over ``-sigma^2/2 +/- 12 sigma``."""
    _check_sigma(sigma)
    lo, hi = _integration_range(sigma, 12.0)
    value, err = integrate.quad(
        lambda z: np.exp(proposal_logpdf(z, sigma)) / alpha_sigma(z, sigma),
        lo,
        hi,
        epsabs=epsabs,
        epsrel=1e-10,
        limit=500,
        points=[-0.5 * sigma**2],
    )
    if not np.isfinite(value) or err > max(epsabs, 1e-10 * value) * 10:
        raise ArithmeticError(f"quadrature did not converge (error estimate {err:g})")
    return float(value)


def mean_acceptance(sigma) -> float:
    """Stationary acceptance rate ``E_{pi_sigma x g_sigma}[1 ^ exp(z' - z)]`` of ``Q_sigma``."""
    _check_sigma(sigma)
    lo, hi = sigma**2 / 2 - 12 * sigma, sigma**2 / 2 + 12 * sigma
    value, _ = integrate.quad(
        lambda z: np.exp(invariant_logpdf(z, sigma)) * alpha_sigma(z, sigma), lo, hi, epsabs=1e-12, limit=500
    )
    return float(value)


@dataclass(frozen=True)
class SigmaModel:
    """Log-normal limit with scale ``sigma``: proposal ``N(-s^2/2, s^2)``, invariant ``N(s^2/2, s^2)``."""

    sigma: float

    def __post_init__(self):
        _check_sigma(self.sigma)

    def proposal_logpdf(self, z):
        return proposal_logpdf(z, self.sigma)

    def invariant_logpdf(self, z):
        return invariant_logpdf(z, self.sigma)

    def alpha(self, z):
        return alpha_sigma(z, self.sigma)

    def tau_pmf(self, n):
        return tau_pmf(n, self.sigma)

    def tau_survival(self, n):
        return tau_survival(n, self.sigma)

    @property
    def p_tau_one(self) -> float:
        return tau_one_closed(self.sigma)

    @property
    def expected_tau(self) -> float:
        return expected_tau(self.sigma)


# --------------------------------------------------------------------------
# simulation of the ideal kernel
# --------------------------------------------------------------------------


def simulate_q_sigma(sigma, n_steps: int, n_chains: int = 1, z0=None, rng=None) -> np.ndarray:
    """Simulate the ``Q_sigma`` chain; returns the ``(n_steps + 1, n_chains)`` path.

    Chains start at ``z0`` (default: a draw from the invariant law).
    """
    _check_sigma(sigma)
    rng = as_generator(rng)
    z = np.empty((n_steps + 1, n_chains))
    if z0 is None:
        z[0] = rng.normal(0.5 * sigma**2, sigma, n_chains)
    else:
        z[0] = z0
    for i in range(n_steps):
        prop = rng.normal(-0.5 * sigma**2, sigma, n_chains)
        accept = np.log(rng.random(n_chains)) <= np.minimum(0.0, prop - z[i])
        z[i + 1] = np.where(accept, prop, z[i])
    return z


def simulate_meeting_times(sigma, n_runs: int, rng=None, max_iter: int = 10**6) -> np.ndarray:
    """Meeting times of coupled PIMH under ``Q_sigma``.

    Chain 1 starts from ``g_sigma``; the chains meet at chain 1's first
    acceptance, so ``tau`` is the first ``n`` whose proposal is accepted.
    """
    _check_sigma(sigma)
    rng = as_generator(rng)
    z0 = rng.normal(-0.5 * sigma**2, sigma, n_runs)
    tau = np.zeros(n_runs, dtype=np.int64)
    open_ = np.arange(n_runs)
    n = 0
    while open_.size:
        n += 1
        if n > max_iter:
            raise RuntimeError("meeting did not occur within max_iter")
        prop = rng.normal(-0.5 * sigma**2, sigma, open_.size)
        accept = np.log(rng.random(open_.size)) <= np.minimum(0.0, prop - z0[open_])
        tau[open_[accept]] = n
        open_ = open_[~accept]
    return tau


# --------------------------------------------------------------------------
# sigma estimation and tuning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SigmaEstimate:
    sigma: float
    se: float
    n_replicates: int
    log_liks: np.ndarray

    @property
    def variance(self) -> float:
        return self.sigma**2


def sigma_from_log_liks(log_liks) -> SigmaEstimate:
    """Sample standard deviation of log-likelihood estimates with a jackknife standard error."""
    x = np.asarray(log_liks, dtype=float)
    R = x.size
    if R < 2:
        raise ValueError("need at least two replicates")
    if not np.all(np.isfinite(x)):
        raise ValueError("dead particle filter run: log-likelihood is -inf, sigma undefined")
    sigma = float(np.std(x, ddof=1))
    if R < 3:
        return SigmaEstimate(sigma, float("nan"), R, x)
    # leave-one-out standard deviations from running sums
    s1, s2 = x.sum(), np.sum(x * x)
    loo_mean = (s1 - x) / (R - 1)
    loo_var = ((s2 - x * x) - (R - 1) * loo_mean**2) / (R - 2)
    loo_sd = np.sqrt(np.maximum(loo_var, 0.0))
    se = float(np.sqrt((R - 1) / R * np.sum((loo_sd - loo_sd.mean()) ** 2)))
    return SigmaEstimate(sigma, se, R, x)


def estimate_sigma(source_or_model, obs=None, n_particles=None, n_replicates: int = 100, rng=None, chunk: int = 1000) -> SigmaEstimate:
    """Estimate the standard deviation of ``log p_N`` from independent proposal draws.

    Accepts either a :class:`~coupled_pimh.coupled.ProposalSource` or a
    ``(model, obs, n_particles)`` triple.
    """
    from .coupled import ParticleFilterSource, ProposalSource

    if isinstance(source_or_model, ProposalSource):
        source = source_or_model
    else:
        source = ParticleFilterSource(source_or_model, obs, n_particles)
    if n_replicates < 2:
        raise ValueError("n_replicates must be at least 2")
    rng = as_generator(rng)
    lls = []
    remaining = n_replicates
    while remaining:
        size = min(chunk, remaining)
        lls.append(source.draw(size, rng).log_lik)
        remaining -= size
    return sigma_from_log_liks(np.concatenate(lls))


def recommend_n(pilot_n: int, sigma_hat: float, target: float = SIGMA_OPT) -> int:
    """Particle count giving ``sd(log p_N) ~= target`` assuming ``sigma^2`` proportional to ``1 / N``."""
    if not sigma_hat > 0:
        raise ValueError("sigma_hat must be positive")
    return max(1, int(round(pilot_n * sigma_hat**2 / target**2)))


# --------------------------------------------------------------------------
# integrated autocorrelation time
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IactEstimate:
    value: float
    window: int
    n_samples: int


def autocovariance(x) -> np.ndarray:
    """Biased sample autocovariance at all lags via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def iact(series) -> IactEstimate:
    """Integrated autocorrelation time ``1 + 2 sum_l rho(l)``.

    The sum is truncated with Geyer's initial positive sequence: pairs
    ``rho(2j) + rho(2j + 1)`` are summed until the first non-positive pair.
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 100:
        raise ValueError("need at least 100 samples")
    acov = autocovariance(x)
    if acov[0] <= 0:
        raise ValueError("constant series: IACT undefined")
    rho = acov / acov[0]
    n_pairs = (x.size - 1) // 2
    pairs = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    nonpos = np.flatnonzero(pairs <= 0)
    stop = int(nonpos[0]) if nonpos.size else n_pairs
    value = -1.0 + 2.0 * float(np.sum(pairs[:stop]))
    return IactEstimate(max(value, 1e-12), max(2 * stop - 1, 1), x.size)


def iact_sigma(sigma, n_steps: int = 200_000, rng=None) -> float:
    """IACT of ``Z`` under ``Q_sigma``, estimated by simulation from stationarity."""
    z = simulate_q_sigma(sigma, n_steps, 1, rng=rng)[:, 0]
    return iact(z).value
