"""Bootstrap particle filter with unbiased resampling and full ancestry.

The workhorse is :func:`run_pf_batch`, which runs ``n_runs`` independent
filters side by side so that numpy vectorisation amortises the Python loop
over time steps.  :func:`run_pf` is the single-run view of the same code.

Array conventions (zero-based, time-major):

* ``states``      -- ``(T, N, dim_x)``
* ``ancestors``   -- ``(T - 1, N)``; ``ancestors[t - 1, i]`` is the parent at
  time ``t - 1`` of particle ``i`` at time ``t``
* ``log_norm_weights`` -- ``(T, N)``, each row log-sum-exps to zero
* ``log_lik_prefix``   -- ``(T,)``, entry ``t`` is ``log p_N(y_{1:t+1})``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._utils import as_generator, inverse_cdf_rows, logsumexp_rows
from .models import StateSpaceModel, as_observations

SCHEMES = ("multinomial", "systematic")


class DeadCloudError(ValueError):
    """Operation needs particle weights but every weight was zero at some step."""


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def _normalized_weights(log_w: np.ndarray) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    if np.any(np.isnan(log_w)):
        raise ValueError("NaN log-weight")
    lse = logsumexp_rows(log_w)
    if np.any(np.isneginf(lse)):
        raise DeadCloudError("all weights are zero; cannot resample")
    return np.exp(log_w - np.expand_dims(lse, -1))


def _resample_rows(weights: np.ndarray, n_out: int, scheme: str, rng) -> np.ndarray:
    n_rows = weights.shape[0]
    if scheme == "multinomial":
        u = rng.random((n_rows, n_out))
    elif scheme == "systematic":
        u = (rng.random((n_rows, 1)) + np.arange(n_out)) / n_out
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}; expected one of {SCHEMES}")
    return inverse_cdf_rows(weights, u)


def resample_multinomial(log_norm_weights, n_out: int, rng=None) -> np.ndarray:
    """I.i.d. ancestor indices with ``P[index = k] = W^k``."""
    w = _normalized_weights(np.asarray(log_norm_weights, dtype=float)[None, :])
    return _resample_rows(w, int(n_out), "multinomial", as_generator(rng))[0]


def resample_systematic(log_norm_weights, n_out: int, rng=None) -> np.ndarray:
    """Systematic resampling: one uniform drives a stratified inverse-CDF sweep."""
    w = _normalized_weights(np.asarray(log_norm_weights, dtype=float)[None, :])
    return _resample_rows(w, int(n_out), "systematic", as_generator(rng))[0]


def effective_sample_size(log_norm_weights) -> float:
    w = np.exp(np.asarray(log_norm_weights, dtype=float))
    return float(1.0 / np.sum(w**2))


# --------------------------------------------------------------------------
# clouds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleCloud:
    """Full particle system of one filter run (see module docstring for shapes)."""

    states: np.ndarray
    ancestors: np.ndarray
    log_norm_weights: np.ndarray
    log_lik_prefix: np.ndarray
    scheme: str = "multinomial"

    @property
    def N(self) -> int:
        return self.states.shape[1]

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def dead(self) -> bool:
        return bool(np.isneginf(self.log_lik_prefix[-1]))

    @property
    def ess(self) -> np.ndarray:
        """Effective sample size per time step (diagnostic only)."""
        w = np.exp(self.log_norm_weights)
        return 1.0 / np.sum(w**2, axis=1)

    def paths(self) -> np.ndarray:
        """All ``N`` ancestral lines ending at time ``T``, shape ``(N, T, dim_x)``."""
        return _trace(self.states[:, None], self.ancestors[:, None], np.arange(self.N)[None, :])[0]

    def path(self, leaf: int) -> np.ndarray:
        """Ancestral line of leaf ``leaf``, shape ``(T, dim_x)``."""
        return _trace(self.states[:, None], self.ancestors[:, None], np.array([[leaf]]))[0, 0]


@dataclass(frozen=True)
class PfOutput:
    cloud: ParticleCloud
    drawn: np.ndarray | None
    log_lik: float


def _trace(states, ancestors, leaves):
    """Trace ancestral lines.

    ``states`` (T, B, N, d), ``ancestors`` (T-1, B, N), ``leaves`` (B, L) ->
    paths (B, L, T, d).
    """
    T, B = states.shape[:2]
    L = leaves.shape[1]
    rows = np.arange(B)[:, None]
    out = np.empty((B, L, T) + states.shape[3:], dtype=states.dtype)
    b = leaves
    out[:, :, T - 1] = states[T - 1][rows, b]
    for t in range(T - 2, -1, -1):
        b = ancestors[t][rows, b]
        out[:, :, t] = states[t][rows, b]
    return out


@dataclass
class PfBatch:
    """``n_runs`` independent filter outputs stored with a batch axis.

    Shapes: ``states`` (T, B, N, d); ``ancestors`` (T-1, B, N);
    ``log_norm_weights`` (T, B, N) or ``None`` when only final weights were
    kept (``final_log_weights`` (B, N) is always present);
    ``log_lik_prefix`` (B, T); ``leaves`` (B,) drawn final indices (-1 if dead).
    """

    states: np.ndarray
    ancestors: np.ndarray
    log_norm_weights: np.ndarray | None
    final_log_weights: np.ndarray
    log_lik_prefix: np.ndarray
    leaves: np.ndarray
    scheme: str

    @property
    def size(self) -> int:
        return self.log_lik_prefix.shape[0]

    @property
    def log_lik(self) -> np.ndarray:
        return self.log_lik_prefix[:, -1]

    @property
    def dead(self) -> np.ndarray:
        return np.isneginf(self.log_lik)

    def drawn_paths(self) -> np.ndarray:
        """Trajectory drawn from each run's approximate smoother, ``(B, T, d)``."""
        leaves = np.where(self.leaves >= 0, self.leaves, 0)
        paths = _trace(self.states, self.ancestors, leaves[:, None])[:, 0]
        if np.any(self.dead):
            paths = paths.astype(float, copy=False)
            paths[self.dead] = np.nan
        return paths

    def all_paths(self) -> np.ndarray:
        """Every ancestral line of every run, ``(B, N, T, d)``."""
        B, N = self.final_log_weights.shape
        return _trace(self.states, self.ancestors, np.broadcast_to(np.arange(N), (B, N)))

    def cloud(self, i: int) -> ParticleCloud:
        if self.log_norm_weights is None:
            raise ValueError("weight history was not kept; run with keep_weights=True")
        return ParticleCloud(
            self.states[:, i],
            self.ancestors[:, i],
            self.log_norm_weights[:, i],
            self.log_lik_prefix[i],
            self.scheme,
        )

    def output(self, i: int) -> PfOutput:
        cloud = self.cloud(i)
        drawn = None if cloud.dead else cloud.path(int(self.leaves[i]))
        return PfOutput(cloud, drawn, float(self.log_lik[i]))


def run_pf_batch(
    model: StateSpaceModel,
    obs,
    n_particles: int,
    n_runs: int = 1,
    scheme: str = "multinomial",
    rng=None,
    keep_weights: bool = True,
) -> PfBatch:
    """Run ``n_runs`` independent bootstrap particle filters.

    Every step samples, weights and then (for ``t < T``) resamples, in log
    space; ``log p_N(y_{1:t})`` is accumulated as the running sum of
    ``logsumexp(log w_t) - log N``.  A run whose weights are all zero at some
    step is *dead*: its remaining prefix entries are ``-inf``, its weight
    rows are ``-inf`` and it has no drawn leaf.  Numerically the dead run is
    carried along with uniform weights only to keep the batch rectangular.
    """
    if n_particles < 1 or n_runs < 1:
        raise ValueError("n_particles and n_runs must be at least 1")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown resampling scheme {scheme!r}; expected one of {SCHEMES}")
    obs = as_observations(obs)
    rng = as_generator(rng)
    T, N, B = obs.T, int(n_particles), int(n_runs)
    d = model.dim_x
    log_n = np.log(N)
    rows = np.arange(B)[:, None]

    x = np.asarray(model.sample_initial(B * N, rng)).reshape(B, N, d)
    states = np.empty((T, B, N, d), dtype=x.dtype)
    ancestors = np.empty((max(T - 1, 0), B, N), dtype=np.int32)
    log_w_hist = np.empty((T, B, N)) if keep_weights else None
    prefix = np.empty((B, T))
    alive = np.ones(B, dtype=bool)
    acc = np.zeros(B)

    for t in range(T):
        if t > 0:
            a = _resample_rows(w_prev, N, scheme, rng)
            ancestors[t - 1] = a
            parents = states[t - 1][rows, a].reshape(B * N, d)
            x = np.asarray(model.sample_transition(parents, t, rng)).reshape(B, N, d)
        states[t] = x
        lw = np.asarray(model.obs_logdensity(x.reshape(B * N, d), obs.values[t], t), dtype=float).reshape(B, N)
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ValueError(f"observation log-density returned NaN or +inf at t={t}")
        lse = logsumexp_rows(lw)
        alive &= np.isfinite(lse)
        acc = acc + (lse - log_n)
        prefix[:, t] = acc
        log_w = np.where(alive[:, None], lw - np.where(alive, lse, 0.0)[:, None], -np.inf)
        if keep_weights:
            log_w_hist[t] = log_w
        w_prev = np.where(alive[:, None], np.exp(log_w), 1.0 / N)

    leaves = _resample_rows(w_prev, 1, "multinomial", rng)[:, 0]
    leaves = np.where(alive, leaves, -1)
    return PfBatch(states, ancestors, log_w_hist, log_w, prefix, leaves, scheme)


def run_pf(model: StateSpaceModel, obs, n_particles: int, scheme: str = "multinomial", rng=None) -> PfOutput:
    """One particle filter run; returns the cloud, a drawn trajectory and ``log p_N``."""
    return run_pf_batch(model, obs, n_particles, 1, scheme, rng).output(0)


def draw_trajectory(cloud: ParticleCloud, rng=None) -> np.ndarray:
    """Sample a leaf with probability ``W_T`` and trace its ancestry back to time 1."""
    if cloud.dead:
        raise DeadCloudError("cannot draw from a dead cloud")
    rng = as_generator(rng)
    leaf = resample_multinomial(cloud.log_norm_weights[-1], 1, rng)[0]
    return cloud.path(int(leaf))


def _as_2d_values(values, n):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != n:
        raise ValueError(f"test function returned {values.shape[0]} rows for {n} inputs")
    return values.reshape(n, -1)


def evaluate_test_function(h, samples) -> np.ndarray:
    """Apply a vectorised test function to a stack of samples; returns ``(n, d_h)``.

    Raises ``ValueError`` on non-finite output.
    """
    samples = np.asarray(samples)
    values = _as_2d_values(h(samples), samples.shape[0])
    if not np.all(np.isfinite(values)):
        raise ValueError("test function returned non-finite values")
    return values


def cloud_estimate(cloud: ParticleCloud, h) -> np.ndarray:
    """Weighted average ``sum_i W_T^i h(X_{1:T}^i)`` over the cloud's ancestral lines.

    ``h`` maps a stack of trajectories ``(n, T, dim_x)`` to ``(n,)`` or ``(n, d_h)``.
    """
    if cloud.dead:
        raise DeadCloudError("cannot estimate from a dead cloud")
    values = evaluate_test_function(h, cloud.paths())
    w = np.exp(cloud.log_norm_weights[-1])
    return w @ values / np.sum(w)
