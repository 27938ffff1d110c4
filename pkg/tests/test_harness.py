import numpy as np
import pytest

from dkpca.analysis import BoundParams, StepSchedule, l_lower_bound_main
from dkpca.data import estimate_sigma2, make_covariance, save_csv
from dkpca.errors import ConfigError, InsufficientPointsError
from dkpca.estimator import potential
from dkpca.harness import (
    C_GRID,
    AggregateTrace,
    ExperimentConfig,
    TRACE_HEADER,
    aggregate,
    build_problem,
    compare_bound,
    fit_loglog_slope,
    pick_step_constant,
    record_schedule,
    run_monte_carlo,
    run_trial,
)

SMALL = ExperimentConfig(samples=5000, trials=4, step_c=10.0, minibatch=10)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(algo="power")
    with pytest.raises(ConfigError):
        ExperimentConfig(variant="allreduce")
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(samples=50, minibatch=40, mu=20)
    with pytest.raises(ConfigError):
        ExperimentConfig(variant="dk", local_batch=2)
    with pytest.raises(ConfigError):
        ExperimentConfig(step_c=0)
    cfg = ExperimentConfig(variant="dmk", nodes=5, local_batch=4, mu=7)
    assert (cfg.n_nodes, cfg.b, cfg.B, cfg.discards) == (5, 4, 20, 7)
    rated = ExperimentConfig(variant="dmk", nodes=10, local_batch=10, R_s=1e6, R_p=1e4, R_c=1e3)
    assert rated.discards == 1900


def test_record_schedule():
    its = record_schedule(1000, 50)
    assert its[0] == 0 and its[-1] == 1000
    assert np.all(np.diff(its) > 0)
    np.testing.assert_array_equal(record_schedule(10, stride=3), [0, 3, 6, 9, 10])


def test_trial_deterministic():
    a = run_trial(SMALL, 3)
    b = run_trial(SMALL, 3)
    np.testing.assert_array_equal(a.psi, b.psi)
    np.testing.assert_array_equal(a.samples, b.samples)
    c = run_trial(SMALL, 4)
    assert not np.array_equal(a.psi, c.psi)


def test_trace_invariants():
    tr = run_trial(SMALL.replace(mu=5), 0)
    assert np.all(np.diff(tr.samples) > 0)
    assert np.all((tr.psi >= 0) & (tr.psi <= 1))
    np.testing.assert_array_equal(tr.samples, tr.processed + tr.discarded)


def test_dk_single_node_equals_single():
    single = run_trial(SMALL.replace(minibatch=1), 1)
    dk = run_trial(SMALL.replace(variant="dk", nodes=1, minibatch=1), 1)
    np.testing.assert_array_equal(single.psi, dk.psi)
    np.testing.assert_array_equal(single.samples, dk.samples)


def test_distributed_trace_equals_centralized():
    cen = run_trial(SMALL.replace(minibatch=12), 2)
    dk = run_trial(SMALL.replace(variant="dk", nodes=12), 2)
    dmk = run_trial(SMALL.replace(variant="dmk", nodes=4, local_batch=3), 2)
    np.testing.assert_array_equal(cen.psi, dk.psi)
    np.testing.assert_array_equal(cen.psi, dmk.psi)


def test_discard_accounting():
    T, B, mu = 10_000, 10, 30
    tr = run_trial(SMALL.replace(samples=T, mu=mu), 0)
    assert tr.samples[-1] == T
    assert abs(tr.processed[-1] - T * B / (B + mu)) <= B + mu
    assert tr.processed[-1] + tr.discarded[-1] == T


def test_stream_exhaustion_flagged():
    # T = 105 is five whole 10 + 10 blocks plus 5 arrivals that never fill a batch
    tr = run_trial(ExperimentConfig(samples=105, minibatch=10, mu=10, trials=1, step_c=5.0), 0)
    assert tr.exhausted and tr.samples[-1] == 105
    assert tr.processed[-1] == 50 and tr.discarded[-1] == 55
    tr = run_trial(ExperimentConfig(samples=95, minibatch=10, mu=0, trials=1, step_c=5.0), 0)
    assert tr.exhausted and tr.samples[-1] == 95 and tr.processed[-1] == 90


def test_dataset_trial_runs_and_uses_ground_truth(tmp_path):
    spec = make_covariance(4, 1.0, 0.4, seed=0)
    X = np.random.default_rng(0).standard_normal((2000, 4)) @ np.linalg.cholesky(spec.matrix()).T
    p = tmp_path / "d.csv"
    save_csv(p, X)
    cfg = ExperimentConfig(data=str(p), samples=2000, minibatch=10, step_c=5.0, trials=2)
    prob = build_problem(cfg)
    assert potential(prob.q_star, spec.q_star) < 1e-2
    agg = run_monte_carlo(cfg)
    assert agg.final_mean < 0.1
    with pytest.raises(ConfigError):
        run_trial(cfg.replace(samples=3000), 0)


def test_aggregate_single_trial_and_order():
    tr = run_trial(SMALL, 0)
    agg = aggregate([tr])
    np.testing.assert_array_equal(agg.mean, tr.psi)
    np.testing.assert_array_equal(agg.median, tr.psi)
    trs = [run_trial(SMALL, i) for i in range(3)]
    a = aggregate(trs)
    b = aggregate(trs[::-1])
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.p90, b.p90)


def test_parallel_equals_serial():
    cfg = SMALL.replace(trials=3, samples=2000)
    a = run_monte_carlo(cfg, workers=1)
    b = run_monte_carlo(cfg, workers=2)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.p10, b.p10)


def test_initial_potential_expectation():
    cfg = ExperimentConfig(d=10, samples=100, minibatch=100, trials=400, step_c=1.0)
    agg = run_monte_carlo(cfg)
    assert agg.mean[0] <= 1 - 1 / 10 + 3 * agg.stderr[0]


def test_stderr_shrinks_with_trials():
    base = ExperimentConfig(samples=2000, minibatch=10, step_c=10.0)
    ratios = []
    for seed in range(3):
        a = run_monte_carlo(base.replace(trials=10, seed=seed))
        b = run_monte_carlo(base.replace(trials=40, seed=seed))
        ratios.append(a.stderr[-1] / b.stderr[-1])
    # four times the trials halves the standard error; allow a factor of 2
    assert 1.0 <= np.median(ratios) <= 4.0


def test_psi_recorded_scale_invariant():
    prob = build_problem(SMALL)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(prob.d)
    assert potential(v, prob.q_star) == pytest.approx(potential(17.0 * v, prob.q_star), abs=1e-14)
    unnorm = run_trial(SMALL.replace(normalize=False), 0)
    norm = run_trial(SMALL, 0)
    np.testing.assert_allclose(unnorm.psi, norm.psi, rtol=1e-6, atol=1e-12)


def test_fit_loglog_slope():
    s = np.geomspace(10, 1e5, 100)
    assert fit_loglog_slope((s, 1 / s)) == pytest.approx(-1.0, abs=1e-6)
    assert fit_loglog_slope((s, 3 * s**-0.5)) == pytest.approx(-0.5, abs=1e-6)
    assert fit_loglog_slope((s, np.full_like(s, 0.2))) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(InsufficientPointsError):
        fit_loglog_slope((s[:5], 1 / s[:5]))


def test_csv_output(tmp_path):
    agg = run_monte_carlo(SMALL)
    p = tmp_path / "trace.csv"
    agg.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(TRACE_HEADER)
    rows = np.loadtxt(p, delimiter=",", skiprows=1)
    assert rows.shape == (len(agg.samples), 5)
    assert np.all(np.diff(rows[:, 0]) > 0)
    assert isinstance(agg, AggregateTrace) and agg.n_trials == 4


def test_compare_bound_dominates_with_theory_L():
    # bounded data, so the norm bound r is an actual property of the samples
    cfg = ExperimentConfig(kind="bounded", samples=20_000, minibatch=10, step_c=10.0, trials=5)
    spec = build_problem(cfg).spec
    s2 = estimate_sigma2(spec, M=5000, rng=0) / cfg.B
    params = BoundParams(d=5, r=max(1.0, spec.r), sigma2_eff=s2, delta=0.1, lambda1=1.0, eigengap=0.2)
    L = l_lower_bound_main(params, cfg.step_c)[2]
    agg = run_monte_carlo(cfg.replace(step_L=L))
    rep = compare_bound(agg, params, StepSchedule(c=cfg.step_c, L=L, eigengap=0.2))
    assert rep.ok and rep.violations.size == 0
    assert np.all(np.diff(rep.bound) < 0)
    assert np.all(np.isfinite(rep.ratio)) and np.all(rep.ratio > 0)


def test_pick_step_constant():
    cfg = ExperimentConfig(samples=3000, minibatch=10)
    best, scores = pick_step_constant(cfg, grid=(0.1, 10.0), trials=2)
    assert best == 10.0 and set(scores) == {0.1, 10.0}
    best, _ = pick_step_constant(cfg, grid=(1.0, 5.0, 10.0), trials=2, min_c0=2.0)
    assert best == 10.0
    assert C_GRID[0] == 0.01 and C_GRID[-1] == 200.0
