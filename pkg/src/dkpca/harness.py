"""Monte-Carlo experiment runner: trials, traces, aggregation and rate fits.

A trial is a pure function of ``(config, master seed, trial index)``. Traces
record the potential against the number of samples that have reached the
system, discarded ones included.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .data import (
    ArraySource,
    CovarianceSpec,
    SyntheticSource,
    batch_top_eigenvector,
    center_dataset,
    load_dataset,
    make_covariance,
    save_csv,
)
from .errors import ConfigError, EndOfStream, InsufficientPointsError
from .estimator import apply_direction, exact_sum, potential, random_unit_init, sample_directions
from .network import Splitter, SystemModel, classify_and_mu, run_dk_iteration, run_dmk_iteration

__all__ = [
    "ExperimentConfig",
    "TraceRecord",
    "AggregateTrace",
    "BoundReport",
    "C_GRID",
    "run_trial",
    "run_monte_carlo",
    "aggregate",
    "fit_loglog_slope",
    "compare_bound",
    "pick_step_constant",
    "record_schedule",
]

TRACE_HEADER = ["samples", "mean_psi", "median_psi", "p10", "p90"]

# 1-2-5 log grid used when tuning the step constant
C_GRID = tuple(round(m * 10.0**e, 10) for e in range(-2, 3) for m in (1, 2, 5) if m * 10.0**e <= 200)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a Monte-Carlo run depends on.

    ``variant`` picks how B is formed: ``single`` runs centralized
    (mini-batch) Krasulina with ``minibatch`` samples per step, ``dk`` uses
    one sample on each of ``nodes`` nodes, and ``dmk`` uses ``local_batch``
    samples on each node. The discard count is ``mu``, or is derived from the
    rates ``R_s``, ``R_p``, ``R_c`` when those are all given.
    """

    # data
    d: int = 5
    lambda1: float = 1.0
    eigengap: float = 0.2
    kind: str = "gaussian"
    half_range: float = 1.0
    reference_half_range: float | None = None
    spec_seed: int = 0
    data: str | None = None
    center: bool = True
    # algorithm and system
    algo: str = "krasulina"
    variant: str = "single"
    minibatch: int = 1
    nodes: int = 1
    local_batch: int = 1
    mu: int = 0
    R_s: float | None = None
    R_p: float | None = None
    R_c: float | None = None
    # step size gamma_t = c / (L + t)
    step_c: float = 1.0
    step_L: float = 0.0
    # run
    samples: int = 100_000
    trials: int = 20
    seed: int = 0
    trace_points: int = 200
    trace_stride: int | None = None
    normalize: bool = True

    def __post_init__(self):
        if self.algo not in ("krasulina", "oja"):
            raise ConfigError(f"algo must be krasulina or oja, got {self.algo!r}")
        if self.variant not in ("single", "dk", "dmk"):
            raise ConfigError(f"variant must be single, dk or dmk, got {self.variant!r}")
        if self.variant == "dk" and self.local_batch != 1:
            raise ConfigError("variant dk processes one sample per node (local_batch=1)")
        if min(self.minibatch, self.nodes, self.local_batch) < 1:
            raise ConfigError("minibatch, nodes and local_batch must be >= 1")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.step_c > 0 or self.step_L < 0:
            raise ConfigError("need step_c > 0 and step_L >= 0")
        if self.step_L == 0 and self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if self.trace_stride is not None and self.trace_stride < 1:
            raise ConfigError("trace_stride must be >= 1")
        if self.samples < self.B + self.discards:
            raise ConfigError(f"samples={self.samples} is below one block B + mu = {self.B + self.discards}")

    @property
    def n_nodes(self) -> int:
        return 1 if self.variant == "single" else self.nodes

    @property
    def b(self) -> int:
        if self.variant == "single":
            return self.minibatch
        return 1 if self.variant == "dk" else self.local_batch

    @property
    def B(self) -> int:
        return self.n_nodes * self.b

    @property
    def system(self) -> SystemModel:
        rated = None not in (self.R_s, self.R_p, self.R_c)
        return SystemModel(
            N=self.n_nodes, b=self.b, R_s=self.R_s, R_p=self.R_p, R_c=self.R_c,
            mu_override=None if rated else self.mu,
        )

    @property
    def discards(self) -> int:
        return classify_and_mu(self.system)[1]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TraceRecord:
    trial: int
    samples: np.ndarray
    psi: np.ndarray
    iterations: np.ndarray
    processed: np.ndarray
    discarded: np.ndarray
    exhausted: bool = False


@dataclass
class AggregateTrace:
    samples: np.ndarray
    iterations: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    p10: np.ndarray
    p90: np.ndarray
    stderr: np.ndarray
    n_trials: int
    exhausted: bool = False
    traces: list = field(default_factory=list, repr=False)

    @property
    def final_mean(self) -> float:
        return float(self.mean[-1])

    def rows(self) -> np.ndarray:
        return np.column_stack([self.samples, self.mean, self.median, self.p10, self.p90])

    def to_csv(self, path) -> None:
        X = self.rows()
        save_csv(path, X, header=TRACE_HEADER)


@dataclass
class _Problem:
    d: int
    q_star: np.ndarray
    spec: CovarianceSpec | None = None
    X: np.ndarray | None = None


@functools.lru_cache(maxsize=8)
def _dataset_problem(path: str, center: bool) -> _Problem:
    X = load_dataset(path)
    if center:
        X = center_dataset(X)
    truth = batch_top_eigenvector(X)
    return _Problem(X.shape[1], truth.q_star, X=X)


def build_problem(cfg: ExperimentConfig) -> _Problem:
    if cfg.data:
        return _dataset_problem(cfg.data, cfg.center)
    spec = make_covariance(cfg.d, cfg.lambda1, cfg.eigengap, cfg.spec_seed, kind=cfg.kind,
                           half_range=cfg.half_range, reference_half_range=cfg.reference_half_range)
    return _Problem(spec.d, spec.q_star, spec=spec)


def _total_iterations(T: int, B: int, mu: int) -> int:
    if T < B:
        return 0
    return (T - B) // (B + mu) + 1


def record_schedule(n_iter: int, points: int = 200, stride: int | None = None) -> np.ndarray:
    """Iteration indices at which the potential is recorded (always includes 0 and the last)."""
    if stride is not None:
        its = np.arange(0, n_iter + 1, stride)
    else:
        its = np.unique(np.round(np.geomspace(1, max(n_iter, 1), points)).astype(int))
        its = np.concatenate([[0], its])
    its = its[its <= n_iter]
    if its[-1] != n_iter:
        its = np.append(its, n_iter)
    return np.unique(its)


def _trial_rngs(seed: int, index: int):
    ss = np.random.SeedSequence([int(seed), int(index)])
    init_ss, data_ss = ss.spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def run_trial(cfg: ExperimentConfig, trial_index: int, problem: _Problem | None = None) -> TraceRecord:
    """Run one trial until ``cfg.samples`` samples have reached the system.

    If the stream ends inside a block, the partial arrivals are counted as
    discarded and a final point at ``cfg.samples`` is recorded with
    ``exhausted=True``.
    """
    problem = problem or build_problem(cfg)
    init_rng, data_rng = _trial_rngs(cfg.seed, trial_index)
    est = random_unit_init(problem.d, init_rng, normalized=cfg.normalize)
    if problem.spec is not None:
        source = SyntheticSource(problem.spec, data_rng)
    else:
        n = problem.X.shape[0]
        if cfg.samples > n:
            raise ConfigError(f"samples={cfg.samples} exceeds dataset size {n}")
        source = ArraySource(problem.X, data_rng.permutation(n))

    N, b, B, mu = cfg.n_nodes, cfg.b, cfg.B, cfg.discards
    T = cfg.samples
    n_iter = _total_iterations(T, B, mu)
    wanted = set(record_schedule(n_iter, cfg.trace_points, cfg.trace_stride).tolist())
    splitter = Splitter(source, B, mu, limit=T)
    cur = splitter.cursor
    q = problem.q_star
    c, L = cfg.step_c, cfg.step_L
    rule = cfg.algo

    rows = [(0, potential(est.v, q), 0, 0, 0)]
    exhausted = False
    while True:
        try:
            X = splitter.next_block()
        except EndOfStream:
            exhausted = cur.received > rows[-1][0]
            break
        t = cur.iteration
        gamma = c / (L + t)
        if cfg.variant == "single":
            xi = exact_sum(sample_directions(est.v, X, rule)) / B
            est = apply_direction(est, xi, gamma, B)
        elif cfg.variant == "dk":
            est = run_dk_iteration(est, X, gamma, n_nodes=N, rule=rule)
        else:
            est, _ = run_dmk_iteration(est, X, gamma, mu, N, b, rule=rule)
        if t in wanted:
            rows.append((cur.received, potential(est.v, q), t, cur.processed, cur.discarded))
        if cur.received >= T:
            break
    if rows[-1][0] < cur.received:
        rows.append((cur.received, potential(est.v, q), cur.iteration, cur.processed, cur.discarded))

    arr = np.array(rows, dtype=float)
    return TraceRecord(
        trial=trial_index,
        samples=arr[:, 0].astype(np.int64),
        psi=arr[:, 1],
        iterations=arr[:, 2].astype(np.int64),
        processed=arr[:, 3].astype(np.int64),
        discarded=arr[:, 4].astype(np.int64),
        exhausted=exhausted,
    )


def aggregate(traces: list[TraceRecord]) -> AggregateTrace:
    """Fold trial traces (sorted by trial index) into per-abscissa statistics."""
    traces = sorted(traces, key=lambda tr: tr.trial)
    ref = traces[0].samples
    for tr in traces[1:]:
        if not np.array_equal(tr.samples, ref):
            raise ValueError("trial traces have different abscissas")
    P = np.vstack([tr.psi for tr in traces])
    k = P.shape[0]
    stderr = P.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.zeros(P.shape[1])
    return AggregateTrace(
        samples=ref.copy(),
        iterations=traces[0].iterations.copy(),
        mean=P.mean(axis=0),
        median=np.median(P, axis=0),
        p10=np.percentile(P, 10, axis=0),
        p90=np.percentile(P, 90, axis=0),
        stderr=stderr,
        n_trials=k,
        exhausted=any(tr.exhausted for tr in traces),
        traces=traces,
    )


def _trial_worker(args):
    cfg, index = args
    return run_trial(cfg, index)


def run_monte_carlo(cfg: ExperimentConfig, workers: int = 1) -> AggregateTrace:
    """Run ``cfg.trials`` trials and aggregate them.

    The result does not depend on ``workers``: each trial is seeded from
    ``(cfg.seed, index)`` and the fold is ordered by trial index.
    """
    if workers <= 1:
        problem = build_problem(cfg)
        traces = [run_trial(cfg, i, problem) for i in range(cfg.trials)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_trial_worker, [(cfg, i) for i in range(cfg.trials)]))
    return aggregate(traces)


def fit_loglog_slope(trace, window: float = 1.0, min_points: int = 10) -> float:
    """Least-squares slope of ``log(mean psi)`` against ``log(samples)``.

    Only points with ``samples >= s_max * 10**(-window)`` are used, so
    ``window=1`` fits the last decade of the trace.
    """
    if isinstance(trace, AggregateTrace):
        s, psi = trace.samples, trace.mean
    else:
        s, psi = trace
    s = np.asarray(s, dtype=float)
    psi = np.asarray(psi, dtype=float)
    keep = (s > 0) & (psi > 0)
    s, psi = s[keep], psi[keep]
    if s.size == 0:
        raise InsufficientPointsError("no positive points to fit")
    sel = s >= s.max() * 10.0 ** (-window)
    if sel.sum() < min_points:
        raise InsufficientPointsError(f"need >= {min_points} points in the window, got {int(sel.sum())}")
    slope, _ = np.polyfit(np.log(s[sel]), np.log(psi[sel]), 1)
    return float(slope)


@dataclass
class BoundReport:
    samples: np.ndarray
    iterations: np.ndarray
    empirical: np.ndarray
    bound: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.bound / self.empirical

    @property
    def violations(self) -> np.ndarray:
        """Abscissas where the theoretical bound falls below the empirical mean."""
        return self.samples[self.bound < self.empirical]

    @property
    def ok(self) -> bool:
        return self.violations.size == 0


def compare_bound(trace: AggregateTrace, params: analysis.BoundParams,
                  sched: analysis.StepSchedule) -> BoundReport:
    """Evaluate the expected-potential bound at every recorded iteration."""
    bound = np.array([analysis.theoretical_bound(int(t), params, sched) for t in trace.iterations])
    return BoundReport(trace.samples.copy(), trace.iterations.copy(), trace.mean.copy(), bound)


def pick_step_constant(cfg: ExperimentConfig, grid=C_GRID, trials: int | None = None,
                       seed_offset: int = 10_000, min_c0: float | None = None) -> tuple[float, dict]:
    """Grid-search ``step_c`` by final mean potential.

    Tuning runs use seeds disjoint from the default evaluation seeds. With
    ``min_c0`` set, only constants with ``2 c (lambda1 - lambda2) > min_c0``
    are tried, which keeps the pick inside the domain of the analysis.
    """
    if min_c0 is not None:
        grid = [c for c in grid if 2.0 * c * cfg.eigengap > min_c0]
        if not grid:
            raise ConfigError(f"no grid value gives c0 > {min_c0}")
    scores = {}
    for c in grid:
        trial_cfg = cfg.replace(step_c=float(c), trials=trials or cfg.trials, seed=cfg.seed + seed_offset)
        scores[float(c)] = run_monte_carlo(trial_cfg).final_mean
    best = min(scores, key=scores.get)
    return best, scores
