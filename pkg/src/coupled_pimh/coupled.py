"""Particle independent Metropolis-Hastings and its single-uniform coupling.

A :class:`ProposalSource` produces i.i.d. proposals, each carrying an
unbiased (natural-scale) estimate of a fixed normalising constant in log
space.  Two sources ship with the package: :class:`ParticleFilterSource`
(smoothing for state-space models) and
:class:`coupled_pimh.smc_sampler.SmcSamplerSource` (static posteriors).

The coupled chains follow the lag-one construction: chain 1 starts from one
proposal, and at every iteration ``n >= 1`` a single proposal and a single
uniform drive both acceptance tests, chain 1 at index ``n`` and chain 2 at
index ``n - 1``.  Chain 2 always accepts at ``n = 1``, so its initial state
is the first proposal and the chains can meet at ``tau = 1``.  Because
chain 1's log-likelihood always dominates chain 2's, the chains meet exactly
when chain 1 first accepts; both facts are checked at runtime.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field

import numpy as np

from ._utils import as_generator, inverse_cdf_rows
from .models import StateSpaceModel, as_observations
from .particle_filter import PfBatch, _trace, evaluate_test_function, run_pf_batch


class CouplingInvariantError(AssertionError):
    """A structural property of the coupled chains was violated."""


# --------------------------------------------------------------------------
# proposal sources
# --------------------------------------------------------------------------


@dataclass
class ProposalBatch:
    """``size`` i.i.d. proposals: log estimates ``(B,)`` and test values ``(B, d_h)``."""

    log_lik: np.ndarray
    values: np.ndarray | None = None
    samples: np.ndarray | None = None


class ProposalSource(abc.ABC):
    """Anything that can be used as the independence proposal of PIMH."""

    @abc.abstractmethod
    def draw(self, size: int, rng, h=None, rao_blackwell: bool = False) -> ProposalBatch:
        """Draw ``size`` i.i.d. proposals.

        When ``h`` is given, ``values`` holds ``h`` at each drawn sample, or
        the weighted-cloud average of ``h`` when ``rao_blackwell`` is set.
        """

    def sample(self, rng=None):
        """One proposal as ``(sample, log_lik)``."""
        batch = self.draw(1, as_generator(rng))
        return batch.samples[0], float(batch.log_lik[0])


class ParticleFilterSource(ProposalSource):
    """Bootstrap particle filter runs as PIMH proposals.

    Test functions take a stack of trajectories ``(n, T, dim_x)``.
    """

    def __init__(self, model: StateSpaceModel, obs, n_particles: int, scheme: str = "multinomial"):
        self.model = model
        self.obs = as_observations(obs)
        self.n_particles = int(n_particles)
        self.scheme = scheme

    def __repr__(self):
        return f"ParticleFilterSource({self.model!r}, T={self.obs.T}, N={self.n_particles}, scheme={self.scheme!r})"

    def run(self, size: int, rng, keep_weights: bool = False) -> PfBatch:
        return run_pf_batch(self.model, self.obs, self.n_particles, size, self.scheme, rng, keep_weights=keep_weights)

    def draw(self, size, rng, h=None, rao_blackwell=False):
        pf = self.run(size, rng)
        paths = pf.drawn_paths()
        values = None
        if h is not None:
            values = np.zeros((size, _output_dim(h, paths)))
            alive = ~pf.dead
            if rao_blackwell:
                values[alive] = _weighted_path_average(pf, h, alive)
            elif np.any(alive):
                values[alive] = evaluate_test_function(h, paths[alive])
        return ProposalBatch(pf.log_lik.copy(), values, paths)

    def draw_filtering(self, size, rng, h=None):
        """Per-horizon proposals for unbiased filtering.

        Returns ``(log_lik_prefix (B, T), values (B, T, d_h))`` where
        ``values[b, t]`` is ``h`` applied to a prefix ``x_{1:t+1}`` drawn from
        the filter's time-``t`` weighted particle system.  ``h`` receives
        prefixes ``(n, t + 1, dim_x)``; by default it returns the last state.
        """
        pf = self.run(size, rng, keep_weights=True)
        T, B, N = pf.log_norm_weights.shape
        weights = np.exp(pf.log_norm_weights.transpose(1, 0, 2).reshape(B * T, N))
        weights = np.where(np.isfinite(weights), weights, 0.0)
        dead_rows = weights.sum(axis=1) == 0
        weights[dead_rows] = 1.0
        u = rng.random((B * T, 1))
        leaves = inverse_cdf_rows(weights, u)[:, 0].reshape(B, T)
        out = None
        for t in range(T):
            alive = np.isfinite(pf.log_lik_prefix[:, t])
            if h is None:
                prefix_values = pf.states[t][np.arange(B), leaves[:, t]].astype(float)
            else:
                prefixes = _trace(pf.states[: t + 1], pf.ancestors[:t], leaves[:, t : t + 1])[:, 0]
                prefix_values = np.zeros((B, _output_dim(h, prefixes)))
                if np.any(alive):
                    prefix_values[alive] = evaluate_test_function(h, prefixes[alive])
            prefix_values = prefix_values.reshape(B, -1)
            if out is None:
                out = np.zeros((B, T, prefix_values.shape[1]))
            prefix_values[~alive] = 0.0
            out[:, t] = prefix_values
        return pf.log_lik_prefix.copy(), out


def _output_dim(h, samples) -> int:
    probe = np.asarray(h(np.asarray(samples[:1]) if len(samples) else samples), dtype=float)
    return int(np.prod(probe.shape[1:])) if probe.ndim > 1 else 1


def _weighted_path_average(pf: PfBatch, h, rows) -> np.ndarray:
    paths = pf.all_paths()[rows]  # (b, N, T, d)
    b, N = paths.shape[:2]
    values = evaluate_test_function(h, paths.reshape((b * N,) + paths.shape[2:])).reshape(b, N, -1)
    w = np.exp(pf.final_log_weights[rows])
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("bn,bnk->bk", w, values)


class _ProposalStream:
    """Buffered iterator over i.i.d. evaluated proposals from a source."""

    def __init__(self, source, rng, h, rao_blackwell, chunk):
        self.source = source
        self.rng = rng
        self.h = h
        self.rao_blackwell = rao_blackwell
        self.chunk = max(int(chunk), 1)
        self._ll = np.empty(0)
        self._vals = None
        self._pos = 0

    def next(self):
        if self._pos >= self._ll.shape[0]:
            batch = self.source.draw(self.chunk, self.rng, self.h, self.rao_blackwell)
            self._ll, self._vals, self._pos = batch.log_lik, batch.values, 0
        i = self._pos
        self._pos += 1
        value = self._vals[i] if self._vals is not None else None
        return float(self._ll[i]), value


# --------------------------------------------------------------------------
# acceptance
# --------------------------------------------------------------------------


def pimh_accept(current_log_lik: float, proposal_log_lik: float, u: float) -> bool:
    """Independence MH acceptance test ``u <= min(1, exp(proposal - current))`` in log space.

    A ``-inf`` proposal is never accepted; from a ``-inf`` current state any
    finite proposal is accepted.
    """
    if math.isnan(current_log_lik) or math.isnan(proposal_log_lik) or math.isnan(u):
        raise ValueError("NaN passed to acceptance test")
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must lie in [0, 1]")
    if proposal_log_lik == -math.inf:
        return False
    if current_log_lik == -math.inf:
        return True
    log_u = math.log(u) if u > 0 else -math.inf
    return log_u <= min(0.0, proposal_log_lik - current_log_lik)


def _accept_many(current, proposal, u):
    """Vectorised :func:`pimh_accept` (no validation)."""
    current = np.asarray(current, dtype=float)
    proposal = np.asarray(proposal, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_u = np.log(u)
        ratio = np.minimum(0.0, proposal - current)
    out = log_u <= ratio
    out = np.where(np.isneginf(current), True, out)
    return np.where(np.isneginf(proposal), False, out)


# --------------------------------------------------------------------------
# estimator requests and records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorRequest:
    """Test function ``h``, burn-in ``k``, horizon ``m`` and the Rao-Blackwell switch."""

    h: object
    k: int = 0
    m: int = 0
    rao_blackwell: bool = False

    def __post_init__(self):
        if not (0 <= self.k <= self.m):
            raise ValueError(f"need 0 <= k <= m, got k={self.k}, m={self.m}")


@dataclass(frozen=True)
class CoupledRunRecord:
    tau: int
    estimate: np.ndarray
    mcmc_term: np.ndarray
    bc_term: np.ndarray
    chain1_loglik: np.ndarray
    chain2_loglik: np.ndarray
    pf_calls: int
    chain1_accepts: int = 0
    k: int = 0
    m: int = 0
    chain1_values: np.ndarray | None = None
    chain2_values: np.ndarray | None = None
    # chain 1 started from a supplied state rather than a fresh proposal
    pinned_start: bool = False


@dataclass
class PimhState:
    """Current state of a marginal PIMH chain."""

    value: np.ndarray
    log_lik: float
    n: int = 0
    sample: np.ndarray | None = field(default=None, repr=False)


def h_km_combine(chain1_values, chain2_values, k: int, m: int, tau: int):
    """Time-averaged estimator: ergodic average over ``k..m`` plus the bias correction.

    ``chain1_values`` must cover indices ``0..max(m, tau - 1)`` and
    ``chain2_values`` indices ``0..tau - 2``.  Returns
    ``(estimate, mcmc_term, bc_term)``.
    """
    x = np.asarray(chain1_values, dtype=float)
    y = np.asarray(chain2_values, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y.reshape(-1, x.shape[1]) if y.size else np.zeros((0, x.shape[1]))
    if not (0 <= k <= m) or tau < 1:
        raise ValueError("need 0 <= k <= m and tau >= 1")
    if x.shape[0] < max(m, tau - 1) + 1:
        raise ValueError(f"chain 1 has {x.shape[0]} values, need {max(m, tau - 1) + 1}")
    if y.shape[0] < tau - 1:
        raise ValueError(f"chain 2 has {y.shape[0]} values, need {tau - 1}")
    mcmc = x[k : m + 1].mean(axis=0)
    bc = np.zeros_like(mcmc)
    if tau - 1 >= k + 1:
        ls = np.arange(k + 1, tau)
        coef = np.minimum(1.0, (ls - k) / (m - k + 1))
        bc = coef @ (x[ls] - y[ls - 1])
    return mcmc + bc, mcmc, bc


# --------------------------------------------------------------------------
# chains
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PimhRun:
    values: np.ndarray
    log_lik: np.ndarray
    accepted: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / (self.values.shape[0] - 1)


def run_pimh(source: ProposalSource, request: EstimatorRequest, n_iters: int, rng=None, chunk: int = 256) -> PimhRun:
    """Marginal PIMH chain started from one proposal; ``n_iters`` transitions.

    Returns the ``n_iters + 1`` test-function values (including the initial
    state), the log-likelihood trace and the number of accepted proposals.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    rng = as_generator(rng)
    stream = _ProposalStream(source, rng, request.h, request.rao_blackwell, min(chunk, n_iters + 1))
    ll, val = stream.next()
    values = np.empty((n_iters + 1, np.size(val)))
    lls = np.empty(n_iters + 1)
    values[0], lls[0] = val, ll
    uniforms = rng.random(n_iters)
    accepted = 0
    for n in range(1, n_iters + 1):
        lp, vp = stream.next()
        if pimh_accept(ll, lp, uniforms[n - 1]):
            ll, val = lp, vp
            accepted += 1
        values[n], lls[n] = val, ll
    return PimhRun(values, lls, accepted)


def run_coupled_pimh(
    source: ProposalSource,
    request: EstimatorRequest,
    rng=None,
    chunk: int | None = None,
    initial=None,
    track_after_meeting: bool = False,
) -> CoupledRunRecord:
    """One coupled PIMH run returning the time-averaged unbiased estimator.

    Iterations ``n = 1, ..., max(m, tau)`` are performed, so the run costs
    ``max(m, tau) + 1`` proposals.  ``initial`` optionally pins chain 1's
    starting state as a ``(log_lik, value)`` pair (then only
    ``max(m, tau)`` proposals are consumed).  Proposals are drawn from the
    source in chunks of ``chunk`` (default ``m + 2``); unused proposals are
    discarded, which leaves the estimator's law unchanged since proposals
    are i.i.d.

    With ``track_after_meeting`` chain 2 keeps being updated after the
    meeting and the run checks that it reproduces chain 1 with a lag of one.
    """
    rng = as_generator(rng)
    k, m = request.k, request.m
    stream = _ProposalStream(source, rng, request.h, request.rao_blackwell, chunk or (m + 2))
    if initial is None:
        l1, v1 = stream.next()
        calls = 1
    else:
        l1, v1 = float(initial[0]), np.asarray(initial[1], dtype=float)
        calls = 0
    v1 = np.atleast_1d(np.asarray(v1, dtype=float))
    c1_ll, c1_v = [l1], [v1]
    c2_ll, c2_v = [], []
    l2 = v2 = None
    tau = None
    first_accept = None
    accepts = 0
    n = 1
    while tau is None or n <= max(m, tau):
        lp, vp = stream.next()
        calls += 1
        u = rng.random()
        acc1 = pimh_accept(l1, lp, u)
        if acc1:
            l1, v1 = lp, np.atleast_1d(vp)
            accepts += 1
            if first_accept is None:
                first_accept = n
        if tau is None or track_after_meeting:
            # chain 2 at index n - 1; its initial state is the first proposal
            acc2 = True if n == 1 else pimh_accept(l2, lp, u)
            if acc2:
                l2, v2 = lp, np.atleast_1d(vp)
            c2_ll.append(l2)
            c2_v.append(v2)
            if acc1 and not acc2:
                raise CouplingInvariantError(f"chain 1 accepted without chain 2 at n={n}")
            if not l1 >= l2:
                raise CouplingInvariantError(f"dominance violated at n={n}: {l1} < {l2}")
            if tau is not None and not (l1 == l2 and np.array_equal(v1, v2)):
                raise CouplingInvariantError(f"chains separated after meeting at n={n}")
            if acc1 and tau is None:
                tau = n
        c1_ll.append(l1)
        c1_v.append(v1)
        n += 1

    if tau != first_accept:
        raise CouplingInvariantError("meeting time differs from chain 1's first acceptance")
    chain1 = np.array(c1_v)
    chain2_all = np.array(c2_v).reshape(len(c2_v), chain1.shape[1])
    estimate, mcmc, bc = h_km_combine(chain1, chain2_all[: tau - 1], k, m, tau)
    if not np.all(np.isfinite(estimate)):
        raise ValueError("non-finite estimate")
    return CoupledRunRecord(
        tau=tau,
        estimate=estimate,
        mcmc_term=mcmc,
        bc_term=bc,
        chain1_loglik=np.array(c1_ll),
        chain2_loglik=np.array(c2_ll),
        pf_calls=calls,
        chain1_accepts=accepts,
        k=k,
        m=m,
        chain1_values=chain1,
        chain2_values=chain2_all,
        pinned_start=initial is not None,
    )


def check_record(record: CoupledRunRecord) -> None:
    """Re-verify the structural invariants of a finished run."""
    c1, c2 = record.chain1_loglik, record.chain2_loglik
    if len(c2) < record.tau:
        raise CouplingInvariantError("chain 2 trace shorter than tau")
    if len(c2) > record.tau and not np.array_equal(c1[record.tau : len(c2)], c2[record.tau - 1 : len(c2) - 1]):
        raise CouplingInvariantError("chains separated after meeting")
    if not np.all(c1[1 : record.tau + 1] >= c2[: record.tau]):
        raise CouplingInvariantError("dominance violated")
    if record.pf_calls != max(record.m, record.tau) + (0 if record.pinned_start else 1):
        raise CouplingInvariantError("unexpected proposal count")
    if record.tau - 1 < record.k + 1 and np.any(record.bc_term != 0):
        raise CouplingInvariantError("nonzero bias correction before burn-in")
    if not np.allclose(record.estimate, record.mcmc_term + record.bc_term, rtol=0, atol=1e-12 * (1 + np.abs(record.estimate).max())):
        raise CouplingInvariantError("estimate is not mcmc_term + bc_term")


# --------------------------------------------------------------------------
# unbiased filtering
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FilteringResult:
    """Per-horizon outputs of :func:`unbiased_filtering`; arrays indexed by ``t``."""

    tau: np.ndarray
    estimate: np.ndarray
    mcmc_term: np.ndarray
    bc_term: np.ndarray
    pf_calls: int
    records: list

    @property
    def T(self) -> int:
        return self.tau.shape[0]


def unbiased_filtering(source: ParticleFilterSource, k: int = 0, m: int = 0, h=None, rng=None, chunk=None) -> FilteringResult:
    """Unbiased estimates of filtering expectations at every horizon from one proposal stream.

    Every proposal is a single particle filter run; it provides
    ``log p_N(y_{1:t})`` and a prefix draw for all ``t`` at once, which feed
    ``T`` coupled chain pairs, pair ``t`` targeting ``p(x_{1:t} | y_{1:t})``.
    Each pair uses its own uniform per iteration and keeps its own meeting
    time.  ``h`` maps prefixes ``(n, t, dim_x)`` to values; the default is
    the last state, i.e. the filtering mean.
    """
    if not (0 <= k <= m):
        raise ValueError("need 0 <= k <= m")
    rng = as_generator(rng)
    chunk = chunk or (m + 2)
    buffer_ll, buffer_v, pos = None, None, 0

    def next_proposal():
        nonlocal buffer_ll, buffer_v, pos
        if buffer_ll is None or pos >= buffer_ll.shape[0]:
            buffer_ll, buffer_v = source.draw_filtering(chunk, rng, h)
            pos = 0
        pos += 1
        return buffer_ll[pos - 1], buffer_v[pos - 1]

    l1, v1 = next_proposal()
    T = l1.shape[0]
    c1_ll, c1_v = [l1.copy()], [v1.copy()]
    c2_ll, c2_v = [], []
    l2, v2 = None, None
    tau = np.zeros(T, dtype=np.int64)
    n = 1
    while np.any(tau == 0) or n <= max(m, int(tau.max())):
        lp, vp = next_proposal()
        u = rng.random(T)
        acc1 = _accept_many(l1, lp, u)
        if n == 1:
            acc2 = np.ones(T, dtype=bool)
            l2, v2 = lp.copy(), vp.copy()
        else:
            acc2 = _accept_many(l2, lp, u) & (tau == 0)
            l2 = np.where(acc2, lp, l2)
            v2 = np.where(acc2[:, None], vp, v2)
        open_pairs = tau == 0
        if np.any(acc1 & ~acc2 & open_pairs):
            raise CouplingInvariantError(f"chain 1 accepted without chain 2 at n={n}")
        l1 = np.where(acc1, lp, l1)
        v1 = np.where(acc1[:, None], vp, v1)
        if np.any(open_pairs & ~(l1 >= l2)):
            raise CouplingInvariantError(f"dominance violated at n={n}")
        c2_ll.append(l2.copy())
        c2_v.append(v2.copy())
        tau = np.where(open_pairs & acc1, n, tau)
        c1_ll.append(l1.copy())
        c1_v.append(v1.copy())
        n += 1

    c1_ll, c1_v = np.array(c1_ll), np.array(c1_v)  # (iters + 1, T[, d])
    c2_ll, c2_v = np.array(c2_ll), np.array(c2_v)
    records = []
    for t in range(T):
        tt = int(tau[t])
        stop = max(m, tt) + 1
        est, mcmc, bc = h_km_combine(c1_v[:stop, t], c2_v[: tt - 1, t], k, m, tt)
        records.append(
            CoupledRunRecord(
                tau=tt,
                estimate=est,
                mcmc_term=mcmc,
                bc_term=bc,
                chain1_loglik=c1_ll[:stop, t],
                chain2_loglik=c2_ll[:tt, t],
                pf_calls=stop,
                k=k,
                m=m,
            )
        )
    return FilteringResult(
        tau=tau,
        estimate=np.array([r.estimate for r in records]),
        mcmc_term=np.array([r.mcmc_term for r in records]),
        bc_term=np.array([r.bc_term for r in records]),
        pf_calls=c1_ll.shape[0],
        records=records,
    )
