"""State-space models for the bootstrap particle filter.

Three concrete models ship with the package:

* ``LinearGaussianModel`` -- stationary AR(1) latent process observed in
  Gaussian noise, with an exact Kalman oracle (``kalman_oracle``);
* ``KineticModel`` -- the prokaryotic auto-regulation jump process, simulated
  with Gillespie's direct method;
* ``SvModel`` -- a Levy-driven (Gamma-OU) stochastic volatility model whose
  transition consumes a random number of random variables.

All model methods are vectorised over a leading particle axis: states are
arrays of shape ``(n, dim_x)``.  Densities are returned in log space and
``-inf`` is a legitimate value meaning zero density.
"""

from __future__ import annotations

import abc
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._utils import LOG_2PI, as_generator, gaussian_logpdf


class ObservationSeries:
    """Observations ``y_1, ..., y_T`` stored as a ``(T, dim_y)`` float array."""

    def __init__(self, values):
        values = np.array(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"observations must be a non-empty (T, dim_y) array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("observations contain non-finite entries")
        values.setflags(write=False)
        self.values = values

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.T

    def __getitem__(self, t):
        return self.values[t]

    def truncate(self, t: int) -> "ObservationSeries":
        """The first ``t`` observations."""
        return ObservationSeries(self.values[:t])

    def __eq__(self, other):
        return isinstance(other, ObservationSeries) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"ObservationSeries(T={self.T}, dim={self.dim})"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"y_{i + 1}" for i in range(self.dim)])
            for row in self.values:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "ObservationSeries":
        """Read a CSV with one row per time step; a non-numeric header row is skipped."""
        rows = []
        with open(Path(path), newline="") as fh:
            for i, row in enumerate(csv.reader(fh)):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    if i == 0:
                        continue
                    raise
        return cls(np.array(rows))


def as_observations(obs) -> ObservationSeries:
    return obs if isinstance(obs, ObservationSeries) else ObservationSeries(obs)


class StateSpaceModel(abc.ABC):
    """Base class for models run through the bootstrap particle filter.

    Subclasses set ``dim_x`` and ``dim_y`` and implement the three samplers /
    densities below.  In the bootstrap convention the particle filter's log
    incremental weight at time ``t`` is exactly ``obs_logdensity(x_t, y_t, t)``.
    Time indices ``t`` are zero-based.
    """

    dim_x: int = 1
    dim_y: int = 1

    @abc.abstractmethod
    def sample_initial(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``size`` states from the law of ``X_1``."""

    @abc.abstractmethod
    def sample_transition(self, x: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``X_t`` given ``X_{t-1} = x`` (row-wise)."""

    @abc.abstractmethod
    def obs_logdensity(self, x: np.ndarray, y: np.ndarray, t: int) -> np.ndarray:
        """``log g(y | x)`` for every row of ``x``; never ``+inf`` or NaN."""

    @abc.abstractmethod
    def sample_observation(self, x: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``Y_t`` given ``X_t = x`` (row-wise)."""

    def log_weight_bound(self, t: int):
        """Finite upper bound on the log incremental weight at time ``t``, if known."""
        return None


def simulate_ssm(model: StateSpaceModel, T: int, rng=None):
    """Simulate a latent path and its observations.

    Returns
    -------
    states : ndarray, shape (T, dim_x)
    obs : ObservationSeries
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = as_generator(rng)
    x = model.sample_initial(1, rng)
    states = [x[0]]
    ys = [model.sample_observation(x, 0, rng)[0]]
    for t in range(1, T):
        x = model.sample_transition(x, t, rng)
        states.append(x[0])
        ys.append(model.sample_observation(x, t, rng)[0])
    return np.array(states), ObservationSeries(np.array(ys))


# --------------------------------------------------------------------------
# Linear Gaussian AR(1)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianParams:
    a: float = 0.5
    sigma_y2: float = 10.0
    sigma_x2: float = 1.0
    init_var: float | None = None  # None -> stationary variance sigma_x2 / (1 - a^2)

    def __post_init__(self):
        if not abs(self.a) < 1:
            raise ValueError("|a| must be < 1")
        if self.sigma_y2 <= 0 or self.sigma_x2 <= 0:
            raise ValueError("variances must be positive")
        if self.init_var is not None and self.init_var <= 0:
            raise ValueError("init_var must be positive")

    @property
    def initial_variance(self) -> float:
        if self.init_var is not None:
            return float(self.init_var)
        return self.sigma_x2 / (1.0 - self.a**2)


class LinearGaussianModel(StateSpaceModel):
    """``X_t ~ N(a X_{t-1}, sigma_x2)``, ``Y_t ~ N(X_t, sigma_y2)``, stationary start."""

    dim_x = 1
    dim_y = 1

    def __init__(self, a=0.5, sigma_y2=10.0, sigma_x2=1.0, init_var=None):
        self.params = LinearGaussianParams(a, sigma_y2, sigma_x2, init_var)

    def __repr__(self):
        p = self.params
        return f"LinearGaussianModel(a={p.a}, sigma_y2={p.sigma_y2})"

    def sample_initial(self, size, rng):
        return rng.normal(0.0, np.sqrt(self.params.initial_variance), size=(size, 1))

    def sample_transition(self, x, t, rng):
        p = self.params
        return p.a * x + rng.normal(0.0, np.sqrt(p.sigma_x2), size=x.shape)

    def obs_logdensity(self, x, y, t):
        return gaussian_logpdf(y[0], x[:, 0], self.params.sigma_y2)

    def sample_observation(self, x, t, rng):
        return x + rng.normal(0.0, np.sqrt(self.params.sigma_y2), size=x.shape)

    def log_weight_bound(self, t):
        return -0.5 * (LOG_2PI + np.log(self.params.sigma_y2))


@dataclass(frozen=True)
class KalmanResult:
    log_lik: float
    log_lik_prefix: np.ndarray
    filter_means: np.ndarray
    filter_vars: np.ndarray
    smooth_means: np.ndarray
    smooth_vars: np.ndarray


def kalman_oracle(params, obs) -> KalmanResult:
    """Exact filtering, smoothing and log-likelihood for the AR(1) model.

    ``params`` may be a ``LinearGaussianParams`` or a ``LinearGaussianModel``.
    The log-likelihood is accumulated as the sum of one-step predictive
    log-densities; ``log_lik_prefix[t]`` is ``log p(y_{1:t+1})``.
    """
    if isinstance(params, LinearGaussianModel):
        params = params.params
    obs = as_observations(obs)
    y = obs.values[:, 0]
    T = obs.T
    a, q, r = params.a, params.sigma_x2, params.sigma_y2

    pred_m = np.empty(T)
    pred_v = np.empty(T)
    filt_m = np.empty(T)
    filt_v = np.empty(T)
    loglik_inc = np.empty(T)
    m, v = 0.0, params.initial_variance
    for t in range(T):
        if t > 0:
            m, v = a * filt_m[t - 1], a * a * filt_v[t - 1] + q
        pred_m[t], pred_v[t] = m, v
        s = v + r
        loglik_inc[t] = -0.5 * (LOG_2PI + np.log(s) + (y[t] - m) ** 2 / s)
        gain = v / s
        filt_m[t] = m + gain * (y[t] - m)
        filt_v[t] = (1.0 - gain) * v

    # Rauch-Tung-Striebel backward pass
    sm_m = filt_m.copy()
    sm_v = filt_v.copy()
    for t in range(T - 2, -1, -1):
        j = filt_v[t] * a / pred_v[t + 1]
        sm_m[t] = filt_m[t] + j * (sm_m[t + 1] - pred_m[t + 1])
        sm_v[t] = filt_v[t] + j * j * (sm_v[t + 1] - pred_v[t + 1])

    prefix = np.cumsum(loglik_inc)
    return KalmanResult(float(prefix[-1]), prefix, filt_m, filt_v, sm_m, sm_v)


# --------------------------------------------------------------------------
# Stochastic kinetic model (prokaryotic auto-regulation)
# --------------------------------------------------------------------------

STOICHIOMETRY = np.array(
    [
        [0, 0, 1, 0, 0, 0, -1, 0],
        [0, 0, 0, 1, -2, 2, 0, -1],
        [-1, 1, 0, 0, 1, -1, 0, 0],
        [-1, 1, 0, 0, 0, 0, 0, 0],
    ],
    dtype=np.int64,
)
STOICHIOMETRY.setflags(write=False)


class GillespieEventCapError(RuntimeError):
    """Raised when a Gillespie simulation exceeds its per-interval event cap."""


@dataclass(frozen=True)
class KineticParams:
    rates: tuple = (0.1, 0.7, 0.35, 0.2, 0.1, 0.9, 0.3, 0.1)
    capacity: int = 10
    delta: float = 0.1
    x0: tuple = (8, 8, 8, 5)
    obs_matrix: tuple = ((1, 0, 0, 0), (0, 1, 2, 0))
    max_events: int = 10**6

    def __post_init__(self):
        if len(self.rates) != 8 or min(self.rates) <= 0:
            raise ValueError("need 8 positive rate constants")
        if len(self.x0) != 4 or min(self.x0) < 0 or self.x0[3] > self.capacity:
            raise ValueError("x0 must be 4 nonnegative integers with x0[3] <= capacity")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @property
    def stoichiometry(self) -> np.ndarray:
        return STOICHIOMETRY


def kinetic_hazards(x: np.ndarray, params: KineticParams) -> np.ndarray:
    """Reaction hazards ``f(X, c)`` for a ``(n, 4)`` array of states; returns ``(n, 8)``."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(params.rates, dtype=float)
    x1, x2, x3, x4 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    h = np.stack(
        [
            x4 * x3,
            params.capacity - x4,
            x4,
            x1,
            0.5 * x2 * (x2 - 1.0),
            x3,
            x1,
            x2,
        ],
        axis=1,
    )
    return h * c


def gillespie_propagate(states, params: KineticParams, duration: float, rng=None, return_counts=False):
    """Run Gillespie's direct method for ``duration`` time units from every row of ``states``.

    Vectorised over rows; each row is an independent realisation.  Raises
    ``GillespieEventCapError`` if any row fires more than ``params.max_events``
    reactions.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    rng = as_generator(rng)
    x = np.array(states, dtype=np.int64, copy=True)
    if x.ndim == 1:
        x = x[None, :]
    if np.any(x < 0) or np.any(x[:, 3] > params.capacity):
        raise ValueError("states must be nonnegative with X4 <= capacity")
    n = x.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    clock = np.zeros(n)
    active = np.arange(n) if duration > 0 else np.arange(0)
    stoich_t = STOICHIOMETRY.T
    while active.size:
        h = kinetic_hazards(x[active], params)
        total = h.sum(axis=1)
        with np.errstate(divide="ignore"):
            wait = rng.exponential(size=active.size) / total
        clock[active] += wait
        fires = clock[active] <= duration
        active = active[fires]
        if not active.size:
            break
        h, total = h[fires], total[fires]
        r = np.argmax(np.cumsum(h, axis=1) > (rng.random(active.size) * total)[:, None], axis=1)
        x[active] += stoich_t[r]
        counts[active] += 1
        if np.any(x[active] < 0):
            raise RuntimeError("negative species count after a reaction: hazards and stoichiometry disagree")
        if counts[active].max() > params.max_events:
            raise GillespieEventCapError(f"more than {params.max_events} events in one interval")
    if return_counts:
        return x, counts
    return x


def gillespie_step(state, params: KineticParams, duration: float, rng=None):
    """State of the jump process after ``duration`` time units, starting from ``state``."""
    return gillespie_propagate(np.asarray(state)[None, :], params, duration, rng)[0]


class KineticModel(StateSpaceModel):
    """Jump process observed at times ``t * delta`` through ``obs_matrix`` plus N(0, I) noise.

    The latent state at filter step ``t`` (zero-based) is the species vector at
    process time ``(t + 1) * delta``.
    """

    dim_x = 4
    dim_y = 2

    def __init__(self, params: KineticParams | None = None, **kwargs):
        self.params = params if params is not None else KineticParams(**kwargs)
        self._obs_matrix = np.asarray(self.params.obs_matrix, dtype=float)

    def __repr__(self):
        return f"KineticModel(delta={self.params.delta}, capacity={self.params.capacity})"

    def sample_initial(self, size, rng):
        x0 = np.tile(np.asarray(self.params.x0, dtype=np.int64), (size, 1))
        return gillespie_propagate(x0, self.params, self.params.delta, rng)

    def sample_transition(self, x, t, rng):
        return gillespie_propagate(x, self.params, self.params.delta, rng)

    def obs_logdensity(self, x, y, t):
        resid = np.asarray(y, dtype=float)[None, :] - x @ self._obs_matrix.T
        return -0.5 * np.sum(resid**2, axis=1) - 0.5 * self.dim_y * LOG_2PI

    def sample_observation(self, x, t, rng):
        mean = x @ self._obs_matrix.T
        return mean + rng.standard_normal(mean.shape)

    def log_weight_bound(self, t):
        return -0.5 * self.dim_y * LOG_2PI


# --------------------------------------------------------------------------
# Levy-driven stochastic volatility
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SvParams:
    mu: float = 0.24
    beta: float = -0.28
    xi: float = 0.82
    omega2: float = 0.09
    lam: float = 0.05

    def __post_init__(self):
        if self.xi <= 0 or self.omega2 <= 0 or self.lam <= 0:
            raise ValueError("xi, omega2 and lam must be positive")

    @property
    def jump_rate(self) -> float:
        """Mean number of jumps per unit time, ``lam * xi^2 / omega2``."""
        return self.lam * self.xi**2 / self.omega2

    @property
    def jump_mean(self) -> float:
        """Mean jump size ``omega2 / xi`` (exponential with rate ``xi / omega2``)."""
        return self.omega2 / self.xi


def sv_recursion(prev_w, params: SvParams, jump_offsets, jump_sizes):
    """Deterministic volatility update given the jumps of one unit interval.

    ``jump_offsets`` are the times ``t - C_j`` in [0, 1] (time left until the
    end of the interval) and ``jump_sizes`` the ``E_j``.  Returns ``(W_t, V_t)``.
    """
    jump_offsets = np.asarray(jump_offsets, dtype=float)
    jump_sizes = np.asarray(jump_sizes, dtype=float)
    decay = np.exp(-params.lam)
    w = decay * prev_w + np.sum(np.exp(-params.lam * jump_offsets) * jump_sizes)
    v = (prev_w - w + np.sum(jump_sizes)) / params.lam
    return w, v


def sv_transition(prev_w: float, params: SvParams, rng=None):
    """One step of the spot/actual volatility process; returns ``(W_t, V_t)``."""
    if prev_w < 0:
        raise ValueError("spot volatility must be nonnegative")
    rng = as_generator(rng)
    k = rng.poisson(params.jump_rate)
    offsets = rng.random(k)
    sizes = rng.exponential(params.jump_mean, size=k)
    w, v = sv_recursion(prev_w, params, offsets, sizes)
    return float(w), float(v)


def sv_transition_many(prev_w: np.ndarray, params: SvParams, rng) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``sv_transition`` for an array of previous spot volatilities."""
    prev_w = np.asarray(prev_w, dtype=float)
    n = prev_w.shape[0]
    k = rng.poisson(params.jump_rate, size=n)
    total = int(k.sum())
    owner = np.repeat(np.arange(n), k)
    offsets = rng.random(total)
    sizes = rng.exponential(params.jump_mean, size=total)
    discounted = np.bincount(owner, weights=np.exp(-params.lam * offsets) * sizes, minlength=n)
    summed = np.bincount(owner, weights=sizes, minlength=n)
    w = np.exp(-params.lam) * prev_w + discounted
    v = (prev_w - w + summed) / params.lam
    return w, v


def sv_obs_logdensity(v, y, params: SvParams):
    """``log N(y; mu + beta v, v)``, or ``-inf`` where ``v <= 0``."""
    v = np.asarray(v, dtype=float)
    y = np.asarray(y, dtype=float)
    safe_v = np.where(v > 0, v, 1.0)
    out = -0.5 * (LOG_2PI + np.log(safe_v) + (y - params.mu - params.beta * safe_v) ** 2 / safe_v)
    out = np.where(v > 0, out, -np.inf)
    return out if out.ndim else float(out)


class SvModel(StateSpaceModel):
    """Gamma-OU stochastic volatility; the state row is ``(V_t, W_t)``.

    The pre-sample spot volatility ``W_0`` is drawn from the Gamma law with
    shape ``xi^2 / omega2`` and rate ``xi / omega2`` (mean ``xi``, variance
    ``omega2``), the stationary law of the spot volatility.
    """

    dim_x = 2
    dim_y = 1

    def __init__(self, params: SvParams | None = None, **kwargs):
        self.params = params if params is not None else SvParams(**kwargs)

    def __repr__(self):
        return f"SvModel({self.params})"

    def sample_initial_spot(self, size, rng):
        p = self.params
        return rng.gamma(p.xi**2 / p.omega2, p.omega2 / p.xi, size=size)

    def sample_initial(self, size, rng):
        w0 = self.sample_initial_spot(size, rng)
        w, v = sv_transition_many(w0, self.params, rng)
        return np.column_stack([v, w])

    def sample_transition(self, x, t, rng):
        w, v = sv_transition_many(x[:, 1], self.params, rng)
        return np.column_stack([v, w])

    def obs_logdensity(self, x, y, t):
        return sv_obs_logdensity(x[:, 0], y[0], self.params)

    def sample_observation(self, x, t, rng):
        p = self.params
        v = x[:, :1]
        return p.mu + p.beta * v + np.sqrt(v) * rng.standard_normal(v.shape)


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

MODEL_NAMES = ("ar1", "kinetic", "sv")


def build_model(name: str, params: dict | None = None) -> StateSpaceModel:
    """Instantiate a shipped model by name (``ar1``, ``kinetic`` or ``sv``)."""
    params = dict(params or {})
    if name in ("ar1", "linear-gaussian", "lgssm"):
        return LinearGaussianModel(**params)
    if name == "kinetic":
        for key in ("rates", "x0"):
            if key in params:
                params[key] = tuple(params[key])
        if "obs_matrix" in params:
            params["obs_matrix"] = tuple(tuple(r) for r in params["obs_matrix"])
        return KineticModel(KineticParams(**params))
    if name == "sv":
        return SvModel(SvParams(**params))
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


DEFAULT_T = {"ar1": 100, "kinetic": 100, "sv": 500}


# AR(1) data from this seed give sd(log p_N) spanning the usual tuning range
# (sigma^2 ~ 2.6 at N=10 down to ~0.22 at N=110 with T=100)
REFERENCE_DATA_SEED = 10


def default_dataset(model: StateSpaceModel, T: int, seed: int = REFERENCE_DATA_SEED):
    """Synthetic dataset used when no observation file is supplied."""
    return simulate_ssm(model, T, np.random.default_rng(seed))
