"""Experiment orchestration: configs, replicate farming, aggregation and CSV output.

Replicate ``r`` of an experiment with master seed ``s`` always draws from the
stream ``SeedSequence(s, spawn_key=(r,))`` (grid experiments use
``(j, r)`` for grid point ``j``), so results do not depend on the number of
worker threads or on completion order.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from ._utils import replicate_rng
from .coupled import (
    CoupledRunRecord,
    EstimatorRequest,
    ParticleFilterSource,
    run_coupled_pimh,
    unbiased_filtering,
)
from .large_sample import expected_tau, sigma_from_log_liks, recommend_n, tau_one_closed, tau_pmf, tau_survival
from .models import DEFAULT_T, REFERENCE_DATA_SEED, ObservationSeries, build_model, default_dataset
from .particle_filter import run_pf_batch
from .smc_sampler import MixtureTarget, SmcSamplerSource, conjugate_gaussian_target

log = logging.getLogger(__name__)

KINDS = ("pf", "sigma", "coupled", "filtering", "large-sample", "smc", "inefficiency-grid")
SIGMA_SEED_OFFSET = 1_000_000


# --------------------------------------------------------------------------
# test functions
# --------------------------------------------------------------------------


def path_test_function(name: str) -> Callable:
    """Vectorised test function on trajectory stacks ``(n, T, d)``.

    ``x1``, ``xT``, ``sum_x``, ``sum_x2`` return ``(n, d)``; ``identity``
    returns the flattened path ``(n, T * d)``; ``component:c`` returns the
    path of state component ``c``, ``(n, T)``.
    """
    if name == "x1":
        return lambda x: x[:, 0, :]
    if name == "xT":
        return lambda x: x[:, -1, :]
    if name == "sum_x":
        return lambda x: x.sum(axis=1)
    if name == "sum_x2":
        return lambda x: (x.astype(float) ** 2).sum(axis=1)
    if name == "identity":
        return lambda x: x.reshape(x.shape[0], -1)
    if name.startswith("component:"):
        c = int(name.split(":", 1)[1])
        return lambda x: x[:, :, c]
    if name == "smoothing-set":
        return lambda x: np.concatenate([x[:, 0, :], x[:, -1, :], x.sum(axis=1), (x.astype(float) ** 2).sum(axis=1)], axis=1)
    raise ValueError(f"unknown test function {name!r}")


def point_test_function(name: str) -> Callable:
    """Vectorised test function on point stacks ``(n, D)`` for static targets."""
    if name == "identity":
        return lambda x: x
    if name == "mixture":
        return lambda x: x[:, 0] + x[:, 1] + x[:, 0] ** 2 + x[:, 1] ** 2
    if name.startswith("component:"):
        c = int(name.split(":", 1)[1])
        return lambda x: x[:, c]
    raise ValueError(f"unknown test function {name!r}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Parameters
    ----------
    kind : str
        One of ``pf``, ``sigma``, ``coupled``, ``filtering``, ``large-sample``,
        ``smc``, ``inefficiency-grid``.
    model, model_params : str, dict
        Shipped state-space model and its parameter overrides.
    T, data_seed, data_path : observations
        Synthetic data of length ``T`` from ``data_seed`` unless a CSV path is given.
    N, N_grid : particle count or grid of counts.
    """

    kind: str = "coupled"
    model: str = "ar1"
    model_params: dict = field(default_factory=dict)
    T: int | None = None
    data_seed: int = REFERENCE_DATA_SEED
    data_path: str | None = None
    N: int = 64
    N_grid: list = field(default_factory=list)
    scheme: str = "multinomial"
    k: int = 0
    m: int = 0
    h: str | None = None
    rao_blackwell: bool = False
    replicates: int = 100
    sigma_replicates: int = 1000
    seed: int = 0
    threads: int = 1
    z: float = 1.96
    out: str | None = None
    chunk: int | None = None
    # large-sample
    sigma: float | None = None
    n_max: int = 30
    # smc
    target: str = "mixture"
    smc_T: int = 200
    resample: bool = True
    mh_scale: float = 1.0
    mh_steps: int = 1
    mixture_M: int = 100
    mixture_seed: int = 0
    y0: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if not (0 <= self.k <= self.m):
            raise ValueError(f"need 0 <= k <= m, got k={self.k}, m={self.m}")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if any(int(n) < 1 for n in self.N_grid):
            raise ValueError("grid particle counts must be positive")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        data = {k.replace("-", "_"): v for k, v in (data or {}).items()}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError("config file must hold a mapping")
        return cls.from_dict(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=False)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    # builders ----------------------------------------------------------

    def build_model(self):
        return build_model(self.model, self.model_params)

    def observations(self, model=None) -> ObservationSeries:
        if self.data_path:
            return ObservationSeries.from_csv(self.data_path)
        model = model or self.build_model()
        T = self.T or DEFAULT_T[self.model]
        return default_dataset(model, T, self.data_seed)[1]

    def pf_source(self, N: int | None = None) -> ParticleFilterSource:
        model = self.build_model()
        return ParticleFilterSource(model, self.observations(model), N or self.N, self.scheme)

    def smc_source(self) -> SmcSamplerSource:
        if self.target == "mixture":
            mt = MixtureTarget.simulate(self.mixture_M, rng=np.random.default_rng(self.mixture_seed))
            target = mt.tempered(self.smc_T, self.mh_scale, self.mh_steps)
        elif self.target == "conjugate-gaussian":
            target = conjugate_gaussian_target(self.y0, self.smc_T, self.mh_scale, self.mh_steps)
        else:
            raise ValueError(f"unknown target {self.target!r}")
        return SmcSamplerSource(target, self.N, self.resample)

    def request(self, point: bool = False) -> EstimatorRequest:
        """Estimator settings; ``h`` defaults to ``identity`` for points and ``sum_x`` for paths."""
        h = point_test_function(self.h or "identity") if point else path_test_function(self.h or "sum_x")
        return EstimatorRequest(h, self.k, self.m, self.rao_blackwell)


# --------------------------------------------------------------------------
# replicates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplicateResult:
    index: int
    ok: bool
    value: object = None
    error: str = ""


def _run_one(fn, seed, key):
    try:
        return ReplicateResult(key[-1], True, fn(replicate_rng(seed, *key)))
    except Exception as exc:  # recorded per row, excluded from aggregation
        log.warning("replicate %s failed: %s: %s", key, type(exc).__name__, exc)
        return ReplicateResult(key[-1], False, None, f"{type(exc).__name__}: {exc}")


def farm(fn: Callable, n: int, seed: int, threads: int = 1, prefix: Sequence[int] = ()) -> list[ReplicateResult]:
    """Run ``fn(rng)`` for replicates ``0..n-1`` on a bounded thread pool.

    Results come back ordered by replicate index.
    """
    keys = [tuple(prefix) + (r,) for r in range(n)]
    if threads <= 1:
        return [_run_one(fn, seed, key) for key in keys]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda key: _run_one(fn, seed, key), keys))


def run_replicates(config: ExperimentConfig) -> list[ReplicateResult]:
    """Execute ``config.replicates`` independent runs of a replicate-based experiment.

    ``coupled`` and ``smc`` give :class:`CoupledRunRecord` values,
    ``filtering`` gives :class:`~coupled_pimh.coupled.FilteringResult`
    values and ``pf`` gives ``log p_N(y_{1:t})`` for every ``t``.
    """
    c = config
    if c.kind == "coupled":
        source, req = c.pf_source(), c.request()
        fn = lambda rng: run_coupled_pimh(source, req, rng, c.chunk)
    elif c.kind == "smc":
        source, req = c.smc_source(), c.request(point=True)
        fn = lambda rng: run_coupled_pimh(source, req, rng, c.chunk or 1)
    elif c.kind == "filtering":
        source = c.pf_source()
        h = None if c.h in (None, "xT") else path_test_function(c.h)
        fn = lambda rng: unbiased_filtering(source, c.k, c.m, h, rng, c.chunk)
    elif c.kind == "pf":
        model = c.build_model()
        obs = c.observations(model)
        fn = lambda rng: run_pf_batch(model, obs, c.N, 1, c.scheme, rng, keep_weights=False).log_lik_prefix[0]
    else:
        raise ValueError(f"experiment kind {c.kind!r} is not replicate-based")
    return farm(fn, c.replicates, c.seed, c.threads)


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Aggregate:
    R: int
    n_failed: int
    mean: np.ndarray
    variance: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    z: float
    tau_mean: float = float("nan")
    tau_percentiles: dict = field(default_factory=dict)
    mean_pf_calls: float = float("nan")
    inefficiency: np.ndarray | None = None

    def rows(self) -> list[dict]:
        """Long-format summary rows ``(statistic, component, value)``."""
        out = [{"statistic": "R", "component": "", "value": self.R}, {"statistic": "failed", "component": "", "value": self.n_failed}]
        for name in ("mean", "variance", "se", "ci_low", "ci_high"):
            for j, v in enumerate(np.atleast_1d(getattr(self, name))):
                out.append({"statistic": name, "component": j, "value": v})
        if self.inefficiency is not None:
            for j, v in enumerate(np.atleast_1d(self.inefficiency)):
                out.append({"statistic": "inefficiency", "component": j, "value": v})
        if not math.isnan(self.tau_mean):
            out.append({"statistic": "tau_mean", "component": "", "value": self.tau_mean})
            for q, v in self.tau_percentiles.items():
                out.append({"statistic": f"tau_p{q}", "component": "", "value": v})
            out.append({"statistic": "mean_pf_calls", "component": "", "value": self.mean_pf_calls})
        return out


def _successful(records):
    ok, failed = [], 0
    for r in records:
        if isinstance(r, ReplicateResult):
            if r.ok:
                ok.append(r.value)
            else:
                failed += 1
        else:
            ok.append(r)
    return ok, failed


def aggregate(records, N: int | None = None, z: float = 1.96, percentiles=(50, 90, 95, 99)) -> Aggregate:
    """Component-wise mean, variance, SE and CI of replicate estimates.

    ``records`` may mix :class:`CoupledRunRecord`, :class:`ReplicateResult`
    (failed rows are counted and dropped) or plain numbers/arrays.
    Percentiles of ``tau`` use the nearest-rank rule.  When ``N`` is given the
    inefficiency ``variance * N`` is reported.
    """
    ok, failed = _successful(records)
    if len(ok) < 2:
        raise ValueError(f"need at least 2 successful records, got {len(ok)}")
    coupled = all(isinstance(r, CoupledRunRecord) for r in ok)
    est = np.array([np.atleast_1d(r.estimate) if coupled else np.atleast_1d(r) for r in ok], dtype=float)
    est = est.reshape(len(ok), -1)
    R = est.shape[0]
    mean = est.mean(axis=0)
    var = est.var(axis=0, ddof=1)
    se = np.sqrt(var / R)
    kw = {}
    if coupled:
        taus = np.array([r.tau for r in ok])
        kw = dict(
            tau_mean=float(taus.mean()),
            tau_percentiles={q: int(np.percentile(taus, q, method="inverted_cdf")) for q in percentiles},
            mean_pf_calls=float(np.mean([r.pf_calls for r in ok])),
        )
    return Aggregate(R, failed, mean, var, se, mean - z * se, mean + z * se, z, inefficiency=None if N is None else var * N, **kw)


def survival_curve(taus) -> np.ndarray:
    """Empirical ``P[tau >= n]`` with binomial SE for ``n = 1..max(tau)``; rows ``(n, p, se)``."""
    taus = np.asarray(taus, dtype=np.int64).ravel()
    if taus.size == 0:
        raise ValueError("need at least one meeting time")
    n = np.arange(1, taus.max() + 2)
    counts = np.bincount(taus, minlength=n[-1] + 1)
    # number of tau >= n via reversed cumulative counts
    at_least = np.cumsum(counts[::-1])[::-1][n]
    p = at_least / taus.size
    se = np.sqrt(p * (1 - p) / taus.size)
    return np.column_stack([n, p, se])


# --------------------------------------------------------------------------
# experiment drivers (return tables as lists of dicts)
# --------------------------------------------------------------------------


@dataclass
class ExperimentOutput:
    rows: list
    summary: list = field(default_factory=list)
    plot_data: dict = field(default_factory=dict)


def _coupled_rows(results):
    rows = []
    for res in results:
        row = {"replicate": res.index, "ok": int(res.ok)}
        if res.ok:
            rec = res.value
            row.update(tau=rec.tau, pf_calls=rec.pf_calls)
            row.update({f"estimate_{j}": v for j, v in enumerate(np.atleast_1d(rec.estimate))})
        else:
            row.update(error=res.error)
        rows.append(row)
    return rows


def _run_coupled_like(c: ExperimentConfig) -> ExperimentOutput:
    results = run_replicates(c)
    out = ExperimentOutput(_coupled_rows(results))
    ok, _ = _successful(results)
    if len(ok) >= 2:
        out.summary = aggregate(results, c.N, c.z).rows()
    if ok:
        surv = survival_curve([r.tau for r in ok])
        out.plot_data["survival"] = surv[:, :2]
    return out


def _run_filtering(c):
    results = run_replicates(c)
    rows = []
    for res in results:
        if not res.ok:
            rows.append({"replicate": res.index, "ok": 0, "error": res.error})
            continue
        fr = res.value
        for t in range(fr.T):
            row = {"replicate": res.index, "ok": 1, "t": t + 1, "tau": int(fr.tau[t]), "pf_calls": fr.pf_calls}
            row.update({f"estimate_{j}": v for j, v in enumerate(np.atleast_1d(fr.estimate[t]))})
            rows.append(row)
    out = ExperimentOutput(rows)
    ok, _ = _successful(results)
    if ok:
        means = np.mean([fr.estimate[:, 0] for fr in ok], axis=0)
        out.plot_data["filtering_mean"] = np.column_stack([np.arange(1, means.size + 1), means])
    return out


def _run_pf(c):
    results = run_replicates(c)
    rows = []
    for r in results:
        if not r.ok:
            rows.append({"replicate": r.index, "ok": 0, "error": r.error})
            continue
        for t, v in enumerate(r.value):
            rows.append({"replicate": r.index, "ok": 1, "t": t + 1, "log_lik_prefix": v})
    ok, failed = _successful(results)
    summary = []
    if len(ok) >= 2:
        ll = np.array([v[-1] for v in ok])
        summary = [
            {"statistic": "R", "component": "", "value": len(ok)},
            {"statistic": "failed", "component": "", "value": failed},
            {"statistic": "mean_log_lik", "component": "", "value": ll.mean()},
            {"statistic": "var_log_lik", "component": "", "value": ll.var(ddof=1)},
        ]
    return ExperimentOutput(rows, summary)


def sigma_for(c: ExperimentConfig, N: int, grid_index: int = 0):
    """Estimate ``sd(log p_N)`` from ``c.sigma_replicates`` filter runs at ``N``."""
    source = c.pf_source(N)
    rng = replicate_rng(c.seed, SIGMA_SEED_OFFSET + grid_index)
    lls = []
    remaining = c.sigma_replicates
    while remaining:
        size = min(remaining, 500)
        lls.append(source.draw(size, rng).log_lik)
        remaining -= size
    return sigma_from_log_liks(np.concatenate(lls))


def _run_sigma(c):
    grid = [int(n) for n in (c.N_grid or [c.N])]
    rows = []
    for j, N in enumerate(grid):
        est = sigma_for(c, N, j)
        rows.append({"N": N, "sigma_hat": est.sigma, "sigma_se": est.se, "sigma2_hat": est.variance, "recommended_N": recommend_n(N, est.sigma)})
    plot = {"sigma2": np.array([[r["N"], r["sigma2_hat"]] for r in rows])}
    return ExperimentOutput(rows, plot_data=plot)


def _run_large_sample(c):
    if c.sigma is not None:
        sigma = c.sigma
        summary = [{"statistic": "sigma", "component": "", "value": sigma}]
    else:
        est = sigma_for(c, c.N)
        sigma = est.sigma
        summary = [
            {"statistic": "sigma", "component": "", "value": sigma},
            {"statistic": "sigma_se", "component": "", "value": est.se},
        ]
    n = np.arange(1, c.n_max + 1)
    pmf = tau_pmf(n, sigma)
    surv = tau_survival(n, sigma)
    rows = [{"n": int(a), "pmf": p, "survival": s} for a, p, s in zip(n, pmf, surv)]
    summary += [
        {"statistic": "expected_tau", "component": "", "value": expected_tau(sigma)},
        {"statistic": "p_tau_1", "component": "", "value": tau_one_closed(sigma)},
    ]
    return ExperimentOutput(rows, summary, {"pmf": np.column_stack([n, pmf]), "survival": np.column_stack([n, surv])})


def _run_grid(c):
    if not c.N_grid:
        raise ValueError("inefficiency-grid needs a nonempty N_grid")
    grid = [int(n) for n in c.N_grid]
    rows = []
    for j, N in enumerate(grid):
        sig = sigma_for(c, N, j)
        source, req = c.pf_source(N), c.request()
        results = farm(lambda rng: run_coupled_pimh(source, req, rng, c.chunk), c.replicates, c.seed, c.threads, prefix=(j,))
        agg = aggregate(results, N, c.z)
        scale = c.m - c.k + 1
        row = {"N": N, "sigma_hat": sig.sigma, "sigma_se": sig.se, "R": agg.R, "failed": agg.n_failed, "tau_mean": agg.tau_mean, "mean_pf_calls": agg.mean_pf_calls}
        for i, v in enumerate(agg.variance):
            row[f"variance_{i}"] = v
            row[f"inefficiency_{i}"] = scale * v * N
        rows.append(row)
        log.info("grid N=%d sigma=%.3f done", N, sig.sigma)
    plot = {"inefficiency": np.array([[r["sigma_hat"], r["inefficiency_0"]] for r in rows])}
    return ExperimentOutput(rows, plot_data=plot)


def grid_minimum(rows, component: int = 0) -> dict:
    """Row of an inefficiency grid with the smallest inefficiency for ``component``."""
    return min(rows, key=lambda r: r[f"inefficiency_{component}"])


def run_experiment(config: ExperimentConfig) -> ExperimentOutput:
    drivers = {
        "coupled": _run_coupled_like,
        "smc": _run_coupled_like,
        "filtering": _run_filtering,
        "pf": _run_pf,
        "sigma": _run_sigma,
        "large-sample": _run_large_sample,
        "inefficiency-grid": _run_grid,
    }
    return drivers[config.kind](config)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def rows_to_csv(rows: list[dict]) -> str:
    """CSV text with a header row; columns in first-seen order, blanks for missing cells."""
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, restval="", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def write_outputs(output: ExperimentOutput, path, plot_data: bool = False) -> list[Path]:
    """Write the main CSV, a ``.summary.csv`` sidecar and optional ``.dat`` plot files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(output.rows))
    written = [path]
    if output.summary:
        spath = path.with_suffix(".summary.csv")
        spath.write_text(rows_to_csv(output.summary))
        written.append(spath)
    if plot_data:
        for name, table in output.plot_data.items():
            ppath = path.with_suffix(f".{name}.dat")
            np.savetxt(ppath, np.asarray(table, dtype=float), fmt="%.10g")
            written.append(ppath)
    return written
